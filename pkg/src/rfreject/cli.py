"""Command-line front end: generate -> mix -> train -> separate / evaluate, plus bench and sweep.

Every subcommand reads one declarative config (YAML or JSON, see
``DEFAULT_CONFIG``), applies flag overrides (flags win), and records the
resolved config hash and seed in what it writes.

Exit codes: 0 success, 2 config error, 3 data error, 4 real-time infeasible.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from .evaluation import RECEIVERS, SweepRow, recover_audio, separate_stream, table, write_metrics_csv
from .metrics import MetricError, score
from .mixing import DatasetSpec, build_dataset, load_dataset, pool_band, prepare_interference_pool, prepare_soi_pool, save_dataset
from .separators import LmmseSeparator, Passthrough, build_model, load_model, sample_covariance
from .separators.baselines import bandpass
from .separators.training import train
from .signal_core import FrequencyBand, IqSignal, SignalError, read_rfiq, write_rfiq
from .streaming import Clock, StreamConfig, StreamError, StubSeparator, batching_sweep, run_stream, write_sweep_csv
from .toy import ToyTask
from .waveforms import FmConfig, OfdmConfig, WavFormatError, fm_modulate, ofdm_generate, speech_like_audio, wav_read, wav_write

log = logging.getLogger("rfreject")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "fm": {"deviation_hz": 5000.0, "audio_rate_hz": 8000.0, "rf_rate_hz": 50000.0, "audio_cutoff_hz": 3600.0, "filter_taps": 201},
    "ofdm": {"fft_size": 64, "num_active_subcarriers": 48, "cp_length": 16, "subcarrier_spacing_hz": 15000.0, "qam_order": 4},
    "sources": {"soi_seconds": 30.0, "interference_seconds": 1.0, "soi_wav": None},
    "dataset": {"slice_length": 2048, "sinr_range_db": [-5.0, 15.0], "count": 2000, "shift_step_hz": 60000.0, "split": [0.9, 0.1]},
    "model": {"kind": "decoder"},
    "train": {"epochs": 16, "lr": 1.5e-3, "lr_decay": 0.9, "batch_size": 16, "clip_norm": 1.0},
    "eval": {
        "sinr_grid": [-10.0, 0.0, 10.0],
        "methods": ["matched_filter", "passthrough", "model"],
        "seconds": 3.0,
        "seed": 10000,
        "receiver": "matched_filter",
        "lmmse_window": 64,
    },
    "stream": {
        "batch_size": 1,
        "signal_length": 10240,
        "sample_rate_hz": 50000.0,
        "duration_s": 2.0,
        "clock_speed": 1.0,
        "queue_capacity": 8,
        "stub_batch_time_s": 0.025,
    },
    "sweep": {"batches": [1, 2, 4, 8, 16], "signal_length": 10240, "trials": 10, "warmup": 3},
}

DATASET_SECTIONS = ("seed", "fm", "ofdm", "sources", "dataset")


# -- config ------------------------------------------------------------------------


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config field '{where}'")
        if isinstance(out[k], dict) and k != "model":
            if not isinstance(v, dict):
                raise ConfigError(f"config field '{where}' must be a mapping")
            out[k] = _merge(out[k], v, where + ".")
        elif k == "model":
            if not isinstance(v, dict):
                raise ConfigError("config field 'model' must be a mapping")
            out[k] = {**out[k], **v} if v.get("kind", out[k].get("kind")) == out[k].get("kind") else dict(v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {p} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p} must hold a mapping at the top level")
    return _merge(DEFAULT_CONFIG, raw)


def apply_set(cfg: dict, assignments: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars/lists."""
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"--set expects section.key=value, got {a!r}")
        key, val = a.split("=", 1)
        parts = key.split(".")
        node: dict = {}
        cur = node
        for part in parts[:-1]:
            cur[part] = {}
            cur = cur[part]
        cur[parts[-1]] = yaml.safe_load(val)
        cfg = _merge(cfg, node)
    return cfg


def config_hash(cfg: dict, sections: Optional[Sequence[str]] = None) -> str:
    sub = cfg if sections is None else {k: cfg[k] for k in sections}
    blob = json.dumps(sub, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(kind, section: str, d: dict):
    try:
        return kind(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{section}': {exc}") from exc


def fm_config(cfg: dict) -> FmConfig:
    return _build(FmConfig, "fm", cfg["fm"])


def ofdm_config(cfg: dict, seed: int, seconds: float) -> OfdmConfig:
    base = _build(OfdmConfig, "ofdm", cfg["ofdm"])
    n_sym = int(math.ceil(seconds * base.sample_rate_hz / base.symbol_length))
    return _build(OfdmConfig, "ofdm", {**cfg["ofdm"], "num_symbols": n_sym, "seed": seed})


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    return _build(
        DatasetSpec,
        "dataset",
        {
            "slice_length": d["slice_length"],
            "sinr_range_db": tuple(d["sinr_range_db"]),
            "count": d["count"],
            "shift_step_hz": d["shift_step_hz"],
            "split": tuple(d["split"]),
            "seed": cfg["seed"],
        },
    )


def toy_task(cfg: dict) -> ToyTask:
    return ToyTask(
        slice_length=cfg["dataset"]["slice_length"],
        fm=fm_config(cfg),
        ofdm=_build(OfdmConfig, "ofdm", cfg["ofdm"]),
        shift_step_hz=cfg["dataset"]["shift_step_hz"],
        soi_seconds=cfg["sources"]["soi_seconds"],
        interference_seconds=cfg["sources"]["interference_seconds"],
    )


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "dataset_hash": config_hash(cfg, DATASET_SECTIONS), "seed": cfg["seed"]}


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands ----------------------------------------------------------------------


def cmd_generate(cfg: dict, args) -> int:
    out = _outdir(args.out)
    seed = cfg["seed"]
    fm = fm_config(cfg)
    src = cfg["sources"]
    if src.get("soi_wav"):
        try:
            audio = wav_read(src["soi_wav"])
        except (OSError, WavFormatError) as exc:
            raise DataError(f"cannot read SOI WAV {src['soi_wav']}: {exc}") from exc
    else:
        audio = speech_like_audio(src["soi_seconds"], fm.audio_rate_hz, seed=seed)
    soi = fm_modulate(audio, fm)
    ocfg = ofdm_config(cfg, seed + 1, src["interference_seconds"])
    interf, grid = ofdm_generate(ocfg)
    write_rfiq(out / "soi.rfiq", soi)
    wav_write(out / "soi_audio.wav", audio, encoding="float32")
    write_rfiq(out / "interference.rfiq", interf)
    info = {
        **_stamp(cfg),
        "files": {"soi": "soi.rfiq", "soi_audio": "soi_audio.wav", "interference": "interference.rfiq"},
        "soi_rate_hz": soi.sample_rate_hz,
        "interference_rate_hz": interf.sample_rate_hz,
        "ofdm_occupied_bandwidth_hz": ocfg.occupied_bandwidth_hz,
        "config": cfg,
    }
    _write_json(out / "sources.json", info)
    print(f"wrote {len(soi)} SOI samples @ {soi.sample_rate_hz:g} Hz and {len(interf)} interference samples @ {interf.sample_rate_hz:g} Hz to {out}")
    return EXIT_OK


def _read_sources(directory: str):
    d = Path(directory)
    meta_path = d / "sources.json"
    if not meta_path.exists():
        raise DataError(f"{d} has no sources.json; run `generate` first")
    meta = json.loads(meta_path.read_text())
    try:
        soi = read_rfiq(d / meta["files"]["soi"])
        interf = read_rfiq(d / meta["files"]["interference"])
    except (OSError, SignalError) as exc:
        raise DataError(f"cannot read source files in {d}: {exc}") from exc
    return soi, interf, meta


def cmd_mix(cfg: dict, args) -> int:
    soi, interf, meta = _read_sources(args.sources)
    spec = dataset_spec(cfg)
    out = Path(args.out)
    stamp = _stamp(cfg)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not args.force:
        old = json.loads(manifest_path.read_text()).get("dataset_hash")
        why = "same config hash" if old == stamp["dataset_hash"] else f"hash {old} != {stamp['dataset_hash']}"
        raise DataError(f"{manifest_path} already exists ({why}); pass --force to rebuild")
    fs = fm_config(cfg).rf_rate_hz
    soi_pool = prepare_soi_pool(soi, spec.slice_length)
    interf_pool = prepare_interference_pool(interf, spec, fs, occupied_bw_hz=meta["ofdm_occupied_bandwidth_hz"])
    pairs = len(soi_pool) * len(interf_pool)
    print(f"pools: {len(soi_pool)} SOI slices x {len(interf_pool)} interference slices = {pairs} distinct pairs")
    if spec.count > pairs:
        raise DataError(f"requested {spec.count} examples but the pools give only {len(soi_pool)} x {len(interf_pool)} = {pairs} pairs")
    band = pool_band(soi_pool)
    train_set, val_set = build_dataset(soi_pool, interf_pool, spec, band)
    errs = [abs(ex.achieved_sinr_db - ex.target_sinr_db) for ex in train_set + val_set]
    save_dataset(out, train_set, val_set, spec, extra={**stamp, "soi_band": [band.low_hz, band.high_hz], "config": cfg})
    print(f"audit: {len(errs)} mixtures, max |achieved - target| SINR = {max(errs):.3e} dB")
    print(f"wrote {len(train_set)} train / {len(val_set)} val examples to {out}")
    return EXIT_OK


def _model_from_cfg(cfg: dict):
    try:
        return build_model({**cfg["model"], "seed": cfg["model"].get("seed", cfg["seed"])})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section 'model': {exc}") from exc


def _load_data(directory: str):
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise DataError(f"{d} has no manifest.json; run `mix` first")
    return load_dataset(d)


def cmd_train(cfg: dict, args) -> int:
    train_set, val_set, manifest = _load_data(args.data)
    if not train_set or not val_set:
        raise DataError("dataset needs both train and val examples")
    out = _outdir(args.out)
    model = _model_from_cfg(cfg)
    t = cfg["train"]
    res = train(
        model,
        train_set,
        val_set,
        epochs=t["epochs"],
        lr=t["lr"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        clip_norm=t["clip_norm"],
        lr_decay=t["lr_decay"],
        log_path=out / "train_log.csv",
        checkpoint=out / "model",
        checkpoint_meta={**_stamp(cfg), "dataset_hash": manifest.get("dataset_hash"), "soi_band": manifest.get("soi_band")},
    )
    _write_json(
        out / "train.json",
        {**_stamp(cfg), "dataset_hash": manifest.get("dataset_hash"), "best_val": res.best_val, "best_epoch": res.best_epoch,
         "loss_curve": res.loss_curve, "parameters": model.num_parameters()},
    )
    print(f"trained {model.kind} ({model.num_parameters()} parameters): best val MSE {res.best_val:.5f} at epoch {res.best_epoch}")
    return EXIT_OK


def _lmmse_from_data(directory: str, window: int) -> LmmseSeparator:
    train_set, _, _ = _load_data(directory)
    C_s = sample_covariance([ex.soi for ex in train_set], window)
    C_b = sample_covariance([ex.interference_scaled for ex in train_set], window)
    return LmmseSeparator(C_s, C_b)


def _band_from(manifest_or_meta: dict) -> FrequencyBand:
    b = manifest_or_meta.get("soi_band")
    if not b:
        raise DataError("no SOI band recorded; pass --data with a dataset built by `mix`")
    return FrequencyBand(*b)


def cmd_separate(cfg: dict, args) -> int:
    out = _outdir(args.out)
    src = Path(args.input)
    files = sorted(src.glob("*_mixture.rfiq")) if src.is_dir() else [src]
    if not files:
        raise DataError(f"no mixture files under {src}")
    method = args.method
    model = None
    band = None
    if method in ("decoder", "wavenet", "model"):
        if not args.checkpoint:
            raise ConfigError(f"--method {method} needs --checkpoint")
        model, meta = _load_checkpoint(args.checkpoint)
    elif method == "lmmse":
        if not args.data:
            raise ConfigError("--method lmmse needs --data to estimate covariances")
        model = _lmmse_from_data(args.data, cfg["eval"]["lmmse_window"])
    elif method == "matched_filter":
        if not args.data:
            raise ConfigError("--method matched_filter needs --data for the SOI band")
        band = _band_from(_load_data(args.data)[2])
    elif method != "passthrough":
        raise ConfigError(f"unknown method {method!r}")
    for f in files:
        x = read_rfiq(f)
        if method == "passthrough":
            y = x
        elif method == "matched_filter":
            y = bandpass(x, band)
        else:
            y = separate_stream(model, x, args.chunk)
        name = f.name.replace("_mixture.rfiq", "_estimate.rfiq") if f.name.endswith("_mixture.rfiq") else f.stem + "_estimate.rfiq"
        write_rfiq(out / name, y)
    _write_json(out / "separate.json", {**_stamp(cfg), "method": method, "inputs": [f.name for f in files]})
    print(f"{method}: wrote {len(files)} estimates to {out}")
    return EXIT_OK


def _load_checkpoint(stem: str):
    p = Path(stem)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    if not p.with_suffix(".json").exists():
        raise DataError(f"checkpoint {p}.json not found")
    try:
        return load_model(p)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_evaluate(cfg: dict, args) -> int:
    out = _outdir(args.out)
    ev = cfg["eval"]
    if ev["receiver"] not in RECEIVERS:
        raise ConfigError(f"eval.receiver must be one of {RECEIVERS}, got {ev['receiver']!r}")
    if ev["seconds"] < 1.0:
        # filter delays trim the recovered audio, and STOI needs a full analysis segment
        raise ConfigError(f"eval.seconds must be at least 1.0, got {ev['seconds']}")
    manifest = _load_data(args.data)[2] if args.data else None
    methods: Dict[str, object] = {}
    for m in ev["methods"]:
        if m in ("matched_filter", "passthrough"):
            methods[m] = None
        elif m == "model":
            if not args.checkpoint:
                log.warning("no --checkpoint given; skipping the model method")
                continue
            model, meta = _load_checkpoint(args.checkpoint)
            if manifest is not None and meta.get("dataset_hash") != manifest.get("dataset_hash") and not args.force:
                raise DataError(
                    f"checkpoint was trained on dataset {meta.get('dataset_hash')} but --data is {manifest.get('dataset_hash')}; pass --force to evaluate anyway"
                )
            methods[model.kind] = model
        elif m == "lmmse":
            if not args.data:
                raise ConfigError("method lmmse needs --data to estimate covariances")
            methods["lmmse"] = _lmmse_from_data(args.data, ev["lmmse_window"])
        else:
            raise ConfigError(f"unknown eval method {m!r}")
    if manifest is not None:
        band = _band_from(manifest)
    elif args.checkpoint:
        band = _band_from(_load_checkpoint(args.checkpoint)[1])
    else:
        raise ConfigError("evaluate needs --data (or a checkpoint) to know the SOI band")
    task = toy_task(cfg)
    grid = [float(s) for s in ev["sinr_grid"]]
    cases = {s: task.held_out_mixture(s, band, seconds=ev["seconds"], seed=ev["seed"]) for s in grid}
    rows = []
    for s in grid:
        truth, ex = cases[s]
        for name, model in methods.items():
            est = recover_audio(name, ex.mixture, band, task.fm, model, cfg["dataset"]["slice_length"], ev["receiver"])
            rows.append(SweepRow(name, s, score(truth, est)))
    stamp = _stamp(cfg)
    write_metrics_csv(out / "metrics.csv", rows, stamp["config_hash"], stamp["seed"])
    _write_json(out / "evaluate.json", {**stamp, "methods": list(methods), "sinr_grid": grid, "band": [band.low_hz, band.high_hz],
                                        "stoi": table(rows, "stoi"), "sdr_db": table(rows, "sdr_db")})
    for r in rows:
        print(f"{r.method:15s} SINR {r.sinr_db:+6.1f} dB  STOI {r.report.stoi:.3f}  SDR {r.report.sdr_db:7.2f} dB  LSD {r.report.lsd_db:6.2f}  Mel-CD {r.report.mel_cd:6.2f}")
    return EXIT_OK


def _bench_model(cfg: dict, args, clock: Clock):
    if args.model == "stub":
        return StubSeparator(cfg["stream"]["stub_batch_time_s"], clock)
    if args.model in ("decoder", "wavenet"):
        return build_model({"kind": args.model, "seed": cfg["seed"]})
    return _load_checkpoint(args.model)[0]


def cmd_bench(cfg: dict, args) -> int:
    out = _outdir(args.out)
    st = cfg["stream"]
    try:
        scfg = StreamConfig(
            batch_size=st["batch_size"],
            signal_length=st["signal_length"],
            sample_rate_hz=st["sample_rate_hz"],
            queue_capacity=st["queue_capacity"],
            clock_speed=st["clock_speed"],
            model_id=args.model,
        )
    except StreamError as exc:
        raise ConfigError(f"config section 'stream': {exc}") from exc
    clock = Clock(scfg.clock_speed)
    model = _bench_model(cfg, args, clock)
    if args.source:
        source = read_rfiq(args.source)
    else:
        rng = np.random.default_rng(cfg["seed"])
        source = lambda n: (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)  # noqa: E731
    try:
        _, report = run_stream(model, scfg, st["duration_s"], source, clock)
    except StreamError as exc:
        raise ConfigError(str(exc)) from exc
    d = report.to_dict()
    d.update(_stamp(cfg))
    _write_json(out / "latency.json", d)
    report.write_backlog_csv(out / "backlog.csv")
    print(
        f"buffer {report.buffer_latency_s * 1e3:.1f} ms + inference {report.inference_time_s * 1e3:.1f} ms; "
        f"first-sample latency {report.first_sample_latency_s * 1e3:.1f} ms; throughput {report.output_throughput_hz / 1e3:.1f} kHz "
        f"vs input {report.input_throughput_hz / 1e3:.1f} kHz; max backlog {report.max_backlog} samples"
    )
    if not report.realtime_feasible:
        print("NOT real-time feasible: output throughput is below the input rate", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_sweep(cfg: dict, args) -> int:
    out = _outdir(args.out)
    sw = cfg["sweep"]
    clock = Clock(1.0)
    model = _bench_model(cfg, args, clock)
    try:
        rows = batching_sweep(model, sw["signal_length"], sw["batches"], sw["trials"], sw["warmup"], cfg["stream"]["sample_rate_hz"], clock=clock)
    except StreamError as exc:
        raise ConfigError(str(exc)) from exc
    write_sweep_csv(out / "sweep.csv", rows)
    _write_json(out / "sweep.json", {**_stamp(cfg), "model": args.model, "rows": [r.__dict__ for r in rows]})
    for r in rows:
        print(f"B={r.batch_size:3d} {r.status:4s} tau/window {r.tau_p50_s * 1e3:8.2f} ms  throughput {r.throughput_hz / 1e3:9.1f} kHz  buffer {r.buffer_latency_s * 1e3:8.1f} ms{'  <- flattens' if r.flatten else ''}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfreject", description="RF interference rejection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config field")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    g = common(sub.add_parser("generate", help="write SOI and interference source files"))
    g.add_argument("--soi-wav", help="FM-modulate this WAV instead of synthetic speech")
    g.add_argument("--soi-seconds", type=float)
    g.add_argument("--interference-seconds", type=float)

    m = common(sub.add_parser("mix", help="build a mixture dataset from generated sources"))
    m.add_argument("--sources", required=True)
    m.add_argument("--count", type=int)
    m.add_argument("--sinr-range", type=float, nargs=2, metavar=("LOW", "HIGH"))
    m.add_argument("--force", action="store_true")

    t = common(sub.add_parser("train", help="train a neural separator"))
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=["decoder", "wavenet"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    s = common(sub.add_parser("separate", help="map mixture files to estimate files"))
    s.add_argument("--input", required=True, help="dataset directory or one RFIQ file")
    s.add_argument("--method", required=True, choices=["passthrough", "matched_filter", "lmmse", "decoder", "wavenet", "model"])
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="dataset directory (SOI band, LMMSE covariances)")
    s.add_argument("--chunk", type=int, default=2048)

    e = common(sub.add_parser("evaluate", help="metric-vs-SINR table on held-out streams"))
    e.add_argument("--data", help="dataset directory (SOI band and hash check)")
    e.add_argument("--checkpoint")
    e.add_argument("--sinr-grid", help="comma-separated SINR values in dB; 'inf' for clean")
    e.add_argument("--methods", help="comma-separated: matched_filter,passthrough,model,lmmse")
    e.add_argument("--force", action="store_true")

    b = common(sub.add_parser("bench", help="pipelined streaming run with a latency report"))
    b.add_argument("--model", default="stub", help="stub | decoder | wavenet | checkpoint path")
    b.add_argument("--stub-tau", type=float, help="stub batch forward time in seconds")
    b.add_argument("-B", "--batch-size", type=int)
    b.add_argument("-L", "--signal-length", type=int)
    b.add_argument("--fs", type=float)
    b.add_argument("--duration", type=float)
    b.add_argument("--clock-speed", type=float)
    b.add_argument("--source", help="RFIQ file to replay instead of synthetic noise")

    w = common(sub.add_parser("sweep", help="tau(B, L) across batch sizes"))
    w.add_argument("--model", default="decoder", help="stub | decoder | wavenet | checkpoint path")
    w.add_argument("--stub-tau", type=float)
    w.add_argument("-L", "--signal-length", type=int)
    w.add_argument("--batches", help="comma-separated batch sizes")
    w.add_argument("--trials", type=int)
    return p


def _csv_floats(s: str) -> List[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from exc


def resolve_config(args) -> dict:
    cfg = apply_set(load_config(args.config), args.set)
    flags: Dict[str, Dict[str, Any]] = {}

    def put(section, key, value):
        if value is not None:
            if section is None:
                cfg[key] = value
            else:
                flags.setdefault(section, {})[key] = value

    put(None, "seed", args.seed)
    c = args.command
    if c == "generate":
        put("sources", "soi_wav", args.soi_wav)
        put("sources", "soi_seconds", args.soi_seconds)
        put("sources", "interference_seconds", args.interference_seconds)
    elif c == "mix":
        put("dataset", "count", args.count)
        put("dataset", "sinr_range_db", list(args.sinr_range) if args.sinr_range else None)
    elif c == "train":
        if args.model and args.model != cfg["model"].get("kind"):
            cfg["model"] = {"kind": args.model}
        put("train", "epochs", args.epochs)
        put("train", "lr", args.lr)
    elif c == "evaluate":
        put("eval", "sinr_grid", _csv_floats(args.sinr_grid) if args.sinr_grid else None)
        put("eval", "methods", [m.strip() for m in args.methods.split(",")] if args.methods else None)
    elif c == "bench":
        put("stream", "stub_batch_time_s", args.stub_tau)
        put("stream", "batch_size", args.batch_size)
        put("stream", "signal_length", args.signal_length)
        put("stream", "sample_rate_hz", args.fs)
        put("stream", "duration_s", args.duration)
        put("stream", "clock_speed", args.clock_speed)
    elif c == "sweep":
        put("stream", "stub_batch_time_s", args.stub_tau)
        put("sweep", "signal_length", args.signal_length)
        put("sweep", "batches", [int(v) for v in _csv_floats(args.batches)] if args.batches else None)
        put("sweep", "trials", args.trials)
    cfg = _merge(cfg, flags)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


COMMANDS = {
    "generate": cmd_generate,
    "mix": cmd_mix,
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SignalError, WavFormatError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
