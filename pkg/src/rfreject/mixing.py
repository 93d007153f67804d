"""Training-data preparation: slice pools, SINR-controlled mixing, augmentation, datasets."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .signal_core import (
    FrequencyBand,
    IqSignal,
    SignalError,
    design_lowpass,
    filter_signal,
    frequency_shift,
    inband_power,
    occupied_band,
    quantize_c64,
    read_rfiq,
    resample_to,
    slice_signal,
    unit_normalize,
    write_rfiq,
)


@dataclass(frozen=True)
class DatasetSpec:
    slice_length: int = 10240
    sinr_range_db: Tuple[float, float] = (-20.0, 20.0)
    count: int = 1000
    shift_step_hz: float = 0.0
    include_awgn: bool = False
    awgn_power: float = 0.0
    split: Tuple[float, float] = (0.9, 0.1)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sinr_range_db
        if lo > hi:
            raise SignalError(f"sinr_range_db low ({lo}) must be <= high ({hi})")
        if self.count < 1:
            raise SignalError("count must be >= 1")
        if self.slice_length < 1:
            raise SignalError("slice_length must be >= 1")
        if len(self.split) != 2 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise SignalError(f"split fractions must be non-negative and sum to 1, got {self.split}")
        if self.shift_step_hz < 0 or self.awgn_power < 0:
            raise SignalError("shift_step_hz and awgn_power must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sinr_range_db"] = list(self.sinr_range_db)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["sinr_range_db"] = tuple(d.get("sinr_range_db", (-20.0, 20.0)))
        d["split"] = tuple(d.get("split", (0.9, 0.1)))
        return cls(**d)


@dataclass
class MixtureExample:
    mixture: IqSignal
    soi: IqSignal
    interference_scaled: IqSignal
    target_sinr_db: float
    achieved_sinr_db: float
    kappa: float
    soi_band: FrequencyBand
    seed: int = 0
    meta: dict = field(default_factory=dict)


def shift_schedule(occupied_bw_hz: float, step_hz: float) -> List[float]:
    """Multiples of ``step_hz`` that land inside the occupied band (0 always included)."""
    if step_hz <= 0:
        return [0.0]
    k = int(math.floor(occupied_bw_hz / 2 / step_hz + 1e-9))
    return [float(i * step_hz) for i in range(-k, k + 1)]


def prepare_interference_pool(
    raw: IqSignal,
    spec: DatasetSpec,
    target_fs: float,
    occupied_bw_hz: Optional[float] = None,
    shifts: Optional[Sequence[float]] = None,
    cutoff_hz: Optional[float] = None,
    num_taps: int = 257,
) -> List[IqSignal]:
    """Shift, lowpass, resample, slice and unit-normalize wideband interference.

    Each shift brings a different part of the interferer's band to baseband;
    the pool is the union over the schedule. ``shifts`` overrides the schedule
    derived from ``spec.shift_step_hz`` and ``occupied_bw_hz``.
    """
    fs = raw.sample_rate_hz
    if shifts is None:
        bw = occupied_bw_hz if occupied_bw_hz is not None else occupied_band(raw).width_hz
        shifts = shift_schedule(bw, spec.shift_step_hz)
    if cutoff_hz is None:
        cutoff_hz = 0.45 * min(target_fs, fs)
    lp = design_lowpass(cutoff_hz, fs, num_taps) if cutoff_hz < fs / 2 else None
    pool: List[IqSignal] = []
    for delta in shifts:
        # shifting by -delta moves content at +delta down to baseband
        y = frequency_shift(raw, -delta)
        if lp is not None:
            y = filter_signal(y, lp)
        y = resample_to(y, target_fs)
        pool.extend(unit_normalize(s) for s in slice_signal(y, spec.slice_length))
    if not pool:
        raise SignalError(
            f"interference pool is empty: {len(raw)} samples at {fs} Hz resample to fewer "
            f"than one {spec.slice_length}-sample slice at {target_fs} Hz"
        )
    return pool


def prepare_soi_pool(raw: IqSignal, length: int) -> List[IqSignal]:
    if len(raw) < length:
        raise SignalError(f"SOI stream has {len(raw)} samples, shorter than one slice ({length})")
    return [unit_normalize(s) for s in slice_signal(raw, length)]


def sinr_db(s: IqSignal, b: IqSignal, band: FrequencyBand) -> float:
    return 10.0 * math.log10(inband_power(s, band) / inband_power(b, band))


def mix_at_sinr(
    s: IqSignal, b: IqSignal, target_sinr_db: float, soi_band: FrequencyBand, seed: int = 0
) -> MixtureExample:
    """Scale ``b`` so the in-band power ratio equals the target, then add.

    ``interference_scaled`` is stored as ``mixture - soi`` so that the
    decomposition identity holds bit-exactly. ``+inf`` gives a clean mixture
    (kappa = 0).
    """
    if len(s) != len(b) or s.sample_rate_hz != b.sample_rate_hz:
        raise SignalError("SOI and interference must share length and sample rate")
    if math.isnan(target_sinr_db) or target_sinr_db == -math.inf:
        raise SignalError(f"target SINR must be finite or +inf, got {target_sinr_db}")
    if target_sinr_db == math.inf:
        return MixtureExample(
            mixture=s.with_samples(s.samples.copy()),
            soi=s,
            interference_scaled=s.with_samples(np.zeros_like(s.samples)),
            target_sinr_db=math.inf,
            achieved_sinr_db=math.inf,
            kappa=0.0,
            soi_band=soi_band,
            seed=seed,
        )
    ps = inband_power(s, soi_band)
    pb = inband_power(b, soi_band)
    if ps <= 0:
        raise SignalError("SOI has zero in-band power")
    # leakage-level power (numerically zero) would give an absurd kappa
    if pb <= 1e-12 * b.power():
        raise SignalError("interference has zero in-band power; kappa is undefined")
    kappa = math.sqrt(ps / (pb * 10.0 ** (target_sinr_db / 10.0)))
    mixture = s.samples + kappa * b.samples
    interf = s.with_samples(mixture - s.samples)
    achieved = sinr_db(s, interf, soi_band)
    return MixtureExample(
        mixture=s.with_samples(mixture),
        soi=s,
        interference_scaled=interf,
        target_sinr_db=float(target_sinr_db),
        achieved_sinr_db=achieved,
        kappa=kappa,
        soi_band=soi_band,
        seed=seed,
    )


def draw_augmentation(max_shift: int, rng: np.random.Generator) -> Tuple[int, float]:
    shift = int(rng.integers(0, max_shift + 1)) if max_shift > 0 else 0
    theta = float(rng.uniform(0.0, 2 * np.pi))
    return shift, theta


def apply_augmentation(x: np.ndarray, shift: int, theta: float) -> np.ndarray:
    """Circular shift along the last axis, then a common phase rotation."""
    y = np.roll(x, shift, axis=-1)
    if theta:
        y = y * np.exp(1j * theta)
    return y


def augment(x: IqSignal, max_shift: int, rng: np.random.Generator) -> IqSignal:
    shift, theta = draw_augmentation(max_shift, rng)
    return x.with_samples(apply_augmentation(x.samples, shift, theta))


def pool_band(pool: Sequence[IqSignal], fraction: float = 0.99) -> FrequencyBand:
    """Occupied band of the SOI pool as a whole (used as the default SOI band)."""
    n = len(pool[0])
    P = np.zeros(n)
    for s in pool:
        P += np.abs(np.fft.fft(s.samples)) ** 2
    # synthesize a signal whose spectrum is the pooled average
    proxy = IqSignal(np.fft.ifft(np.sqrt(P / len(pool))), pool[0].sample_rate_hz)
    return occupied_band(proxy, fraction)


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def build_example(
    index: int,
    soi_pool: Sequence[IqSignal],
    interference_pool: Sequence[IqSignal],
    spec: DatasetSpec,
    soi_band: FrequencyBand,
) -> MixtureExample:
    rng = example_rng(spec.seed, index)
    i_s = int(rng.integers(len(soi_pool)))
    i_b = int(rng.integers(len(interference_pool)))
    target = float(rng.uniform(*spec.sinr_range_db))
    s = soi_pool[i_s]
    b = interference_pool[i_b]
    if spec.include_awgn and spec.awgn_power > 0:
        noise = rng.standard_normal(len(b)) + 1j * rng.standard_normal(len(b))
        b = b.with_samples(b.samples + noise * math.sqrt(spec.awgn_power / 2))
    ex = mix_at_sinr(s, b, target, soi_band, seed=spec.seed)
    ex.meta = {"index": index, "soi_index": i_s, "interference_index": i_b}
    return ex


def build_dataset(
    soi_pool: Sequence[IqSignal],
    interference_pool: Sequence[IqSignal],
    spec: DatasetSpec,
    soi_band: Optional[FrequencyBand] = None,
) -> Tuple[List[MixtureExample], List[MixtureExample]]:
    """Return ``(train, val)``. Example ``i`` depends only on ``(spec.seed, i)``."""
    if not soi_pool or not interference_pool:
        raise SignalError("SOI and interference pools must be non-empty")
    if soi_band is None:
        soi_band = pool_band(soi_pool)
    examples = [
        build_example(i, soi_pool, interference_pool, spec, soi_band) for i in range(spec.count)
    ]
    n_train = int(round(spec.split[0] * spec.count))
    return examples[:n_train], examples[n_train:]


# -- serialization ---------------------------------------------------------


def _example_record(ex: MixtureExample, stem: str, split: str) -> dict:
    return {
        "stem": stem,
        "split": split,
        "files": {k: f"{stem}_{k}.rfiq" for k in ("mixture", "soi", "interference")},
        "kappa": ex.kappa,
        "target_sinr_db": ex.target_sinr_db,
        "achieved_sinr_db": ex.achieved_sinr_db,
        "soi_band": [ex.soi_band.low_hz, ex.soi_band.high_hz],
        **ex.meta,
    }


def save_dataset(
    directory: Union[str, Path],
    train: Sequence[MixtureExample],
    val: Sequence[MixtureExample],
    spec: DatasetSpec,
    extra: Optional[dict] = None,
) -> dict:
    """Write RFIQ triplets plus ``manifest.json``.

    Stored interference is recomputed as ``mixture - soi`` in complex64 so the
    decomposition stays exact after the float32 round trip.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for split, group in (("train", train), ("val", val)):
        for ex in group:
            stem = f"ex{ex.meta.get('index', len(records)):06d}"
            m32 = ex.mixture.samples.astype(np.complex64)
            s32 = ex.soi.samples.astype(np.complex64)
            b32 = m32 - s32
            fs = ex.mixture.sample_rate_hz
            write_rfiq(out / f"{stem}_mixture.rfiq", IqSignal(m32, fs))
            write_rfiq(out / f"{stem}_soi.rfiq", IqSignal(s32, fs))
            write_rfiq(out / f"{stem}_interference.rfiq", IqSignal(b32, fs))
            records.append(_example_record(ex, stem, split))
    manifest = {"seed": spec.seed, "spec": spec.to_dict(), "examples": records}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(directory: Union[str, Path]) -> Tuple[List[MixtureExample], List[MixtureExample], dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    train, val = [], []
    for rec in manifest["examples"]:
        sig = {k: read_rfiq(d / f) for k, f in rec["files"].items()}
        ex = MixtureExample(
            mixture=sig["mixture"],
            soi=sig["soi"],
            # recompute in float64 so mixture - soi - interference is exactly zero;
            # the stored file is the float32 rounding of the same difference
            interference_scaled=sig["mixture"].with_samples(sig["mixture"].samples - sig["soi"].samples),
            target_sinr_db=rec["target_sinr_db"],
            achieved_sinr_db=rec["achieved_sinr_db"],
            kappa=rec["kappa"],
            soi_band=FrequencyBand(*rec["soi_band"]),
            seed=manifest["seed"],
            meta={k: rec[k] for k in ("index", "soi_index", "interference_index") if k in rec},
        )
        (train if rec["split"] == "train" else val).append(ex)
    return train, val, manifest


__all__ = [
    "DatasetSpec",
    "MixtureExample",
    "shift_schedule",
    "prepare_interference_pool",
    "prepare_soi_pool",
    "mix_at_sinr",
    "sinr_db",
    "augment",
    "draw_augmentation",
    "apply_augmentation",
    "pool_band",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "quantize_c64",
]
