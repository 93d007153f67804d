"""Real-time feasibility: pipelined buffering and inference, latency and throughput accounting.

Buffer latency is ``B*L/fs``; inference time is ``tau(B, L) * B`` where ``tau``
is the measured forward-pass time per window; output throughput is
``B*L / inference_time``. A stream is real-time feasible when the output
throughput keeps up with the sample rate.
"""
from __future__ import annotations

import csv
import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .signal_core import IqSignal, read_rfiq

DEFAULT_QUEUE_CAPACITY = 8
FLATTEN_GAIN = 0.05


class StreamError(ValueError):
    pass


# -- Eqs. of the latency model ---------------------------------------------------


def _positive(**kw) -> None:
    for k, v in kw.items():
        if not v > 0:
            raise StreamError(f"{k} must be positive, got {v}")


def buffer_latency(B: int, L: int, fs: float) -> float:
    """Seconds to accumulate one batch of ``B`` windows of ``L`` samples."""
    _positive(B=B, L=L, fs=fs)
    return B * L / fs


def inference_time(tau: float, B: int) -> float:
    """Batch inference time from the per-window forward time ``tau``."""
    if tau < 0:
        raise StreamError(f"tau must be non-negative, got {tau}")
    _positive(B=B)
    return tau * B


def output_throughput(B: int, L: int, inference_s: float) -> float:
    """Samples per second the inference stage sustains."""
    _positive(B=B, L=L, inference_time=inference_s)
    return B * L / inference_s


# -- clocks ---------------------------------------------------------------------


class Clock:
    """Monotonic wall clock, optionally accelerated.

    With ``speed = k`` every reported second is ``1/k`` real seconds, so a
    60 s stream simulates in ``60/k`` s. Stub models sleep on the same clock;
    real models' compute is reported scaled by ``k`` as well, so use
    ``speed=1`` when timing a real separator.
    """

    def __init__(self, speed: float = 1.0):
        _positive(speed=speed)
        self.speed = float(speed)
        self._t0 = time.monotonic()

    def reset(self) -> None:
        self._t0 = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * self.speed

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds / self.speed)

    def sleep_until(self, t: float) -> None:
        self.sleep(t - self.now())


class StubSeparator:
    """Identity separator whose forward pass takes ``batch_time_s`` on ``clock``."""

    kind = "stub"

    def __init__(self, batch_time_s: float, clock: Optional[Clock] = None):
        if batch_time_s < 0:
            raise StreamError("stub batch time must be non-negative")
        self.batch_time_s = batch_time_s
        self.clock = clock or Clock()

    def predict(self, x: np.ndarray) -> np.ndarray:
        self.clock.sleep(self.batch_time_s)
        return np.array(x, copy=True)


# -- tau measurement --------------------------------------------------------------


@dataclass
class TauStats:
    """Per-window forward time statistics in seconds (batch time divided by ``B``)."""

    mean: float
    p50: float
    p95: float
    min: float
    max: float
    trials: int
    batch_size: int

    @classmethod
    def from_batch_times(cls, batch_times: Sequence[float], B: int) -> "TauStats":
        t = np.asarray(batch_times, dtype=np.float64) / B
        return cls(
            mean=float(t.mean()),
            p50=float(np.percentile(t, 50)),
            p95=float(np.percentile(t, 95)),
            min=float(t.min()),
            max=float(t.max()),
            trials=int(t.size),
            batch_size=int(B),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def check_compatible(model, L: int) -> None:
    cfg = getattr(model, "cfg", None)
    W = getattr(cfg, "window", None)
    if getattr(model, "kind", "") == "decoder" and W and L % W:
        raise StreamError(f"signal length {L} is not divisible by the decoder window {W}")


def measure_tau(
    model,
    B: int,
    L: int,
    trials: int = 10,
    warmup: int = 3,
    clock: Optional[Clock] = None,
    seed: int = 0,
) -> TauStats:
    """Time ``model.predict`` on a random ``(B, 2, L)`` batch.

    ``warmup`` passes are discarded; the remaining ``trials`` are summarized
    per window.
    """
    if trials < 10:
        raise StreamError(f"need at least 10 timed trials, got {trials}")
    if warmup < 3:
        raise StreamError(f"need at least 3 warmup passes, got {warmup}")
    _positive(B=B, L=L)
    check_compatible(model, L)
    clock = clock or Clock()
    x = np.random.default_rng(seed).standard_normal((B, 2, L)).astype(np.float32)
    for _ in range(warmup):
        model.predict(x)
    times = []
    for _ in range(trials):
        t0 = clock.now()
        model.predict(x)
        times.append(clock.now() - t0)
    return TauStats.from_batch_times(times, B)


# -- pipelined stream ---------------------------------------------------------------


@dataclass
class StreamConfig:
    batch_size: int = 1
    signal_length: int = 10240
    sample_rate_hz: float = 50_000.0
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    clock_speed: float = 1.0
    memory_budget_bytes: int = 1 << 30
    model_id: str = "stub"

    def __post_init__(self):
        _positive(
            batch_size=self.batch_size,
            signal_length=self.signal_length,
            sample_rate_hz=self.sample_rate_hz,
            queue_capacity=self.queue_capacity,
            clock_speed=self.clock_speed,
        )
        # float32 I/Q buffers: the queue plus the batch in flight
        need = (self.queue_capacity + 1) * self.buffer_samples * 2 * 4
        if need > self.memory_budget_bytes:
            raise StreamError(f"{need} bytes of buffers exceed the memory budget {self.memory_budget_bytes}")

    @property
    def buffer_samples(self) -> int:
        return self.batch_size * self.signal_length

    @property
    def buffer_period_s(self) -> float:
        return buffer_latency(self.batch_size, self.signal_length, self.sample_rate_hz)


@dataclass
class LatencyReport:
    batch_size: int
    signal_length: int
    sample_rate_hz: float
    buffer_latency_s: float
    tau_stats: TauStats
    inference_time_s: float
    output_throughput_hz: float
    input_throughput_hz: float
    realtime_feasible: bool
    first_sample_latency_s: float
    steady_period_s: float
    samples_in: int
    samples_out: int
    samples_dropped_tail: int
    producer_blocked: int
    backlog_trace: List[Tuple[float, int]] = field(default_factory=list)

    @property
    def overhead_s(self) -> float:
        return self.first_sample_latency_s - self.buffer_latency_s - self.inference_time_s

    @property
    def max_backlog(self) -> int:
        return max((b for _, b in self.backlog_trace), default=0)

    def backlog_growing(self) -> bool:
        """True when the backlog trace keeps rising: positive least-squares slope and
        a final value above two buffers."""
        if len(self.backlog_trace) < 3:
            return False
        t, b = np.asarray(self.backlog_trace, dtype=np.float64).T
        slope = np.polyfit(t, b, 1)[0]
        return bool(slope > 0 and b[-1] > 2 * self.batch_size * self.signal_length)

    def check_arithmetic(self) -> None:
        """Assert the report is consistent with the latency model given its own tau."""
        B, L, fs = self.batch_size, self.signal_length, self.sample_rate_hz
        assert self.buffer_latency_s == buffer_latency(B, L, fs)
        assert self.inference_time_s == inference_time(self.tau_stats.mean, B)
        assert self.output_throughput_hz == output_throughput(B, L, self.inference_time_s)
        assert self.realtime_feasible == (self.output_throughput_hz >= self.input_throughput_hz)
        assert self.samples_in == self.samples_out + self.samples_dropped_tail

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overhead_s"] = self.overhead_s
        return d

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_backlog_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "backlog_samples"])
            for t, b in self.backlog_trace:
                w.writerow([f"{t:.6f}", b])


Source = Union[IqSignal, str, Path, Callable[[int], np.ndarray]]


def _source_samples(source: Source, n: int) -> np.ndarray:
    if isinstance(source, (str, Path)):
        source = read_rfiq(source)
    if isinstance(source, IqSignal):
        if len(source) < n:
            raise StreamError(f"source has {len(source)} samples, the stream needs {n}")
        return source.samples[:n]
    x = np.asarray(source(n))
    if x.size < n:
        raise StreamError(f"generator returned {x.size} samples, the stream needs {n}")
    return x[:n]


def run_stream(model, cfg: StreamConfig, duration_s: float, source: Source, clock: Optional[Clock] = None) -> Tuple[IqSignal, LatencyReport]:
    """Replay ``duration_s`` of ``source`` at the sample rate through a two-stage pipeline.

    The buffer stage wakes at each buffer deadline (the instant its last sample
    has arrived), records the backlog and enqueues the batch; the inference
    stage runs ``model.predict`` on each batch. The stages share only the
    bounded queue. The final partial buffer is not processed.
    """
    _positive(duration_s=duration_s)
    clock = clock or Clock(cfg.clock_speed)
    BL, L, B = cfg.buffer_samples, cfg.signal_length, cfg.batch_size
    check_compatible(model, L)
    n_in = int(round(duration_s * cfg.sample_rate_hz))
    x = _source_samples(source, n_in)
    n_buf = n_in // BL
    period = cfg.buffer_period_s

    q: "queue.Queue" = queue.Queue(maxsize=cfg.queue_capacity)
    outputs: List[Optional[np.ndarray]] = [None] * n_buf
    done_times: List[float] = [0.0] * n_buf
    batch_times: List[float] = []
    trace: List[Tuple[float, int]] = []
    lock = threading.Lock()
    processed = [0]
    blocked = [0]
    errors: List[BaseException] = []

    def record_due(tick: int) -> int:
        # backlog sampled at each buffer deadline up to the end of the input
        now = clock.now()
        while tick < n_buf and (tick + 1) * period <= now + 1e-12:
            with lock:
                trace.append(((tick + 1) * period, (tick + 1) * BL - processed[0]))
            tick += 1
        return tick

    def producer():
        tick = 0
        try:
            for k in range(n_buf):
                clock.sleep_until((k + 1) * period)
                tick = record_due(tick)
                seg = x[k * BL : (k + 1) * BL].reshape(B, L)
                item = (k, np.stack([seg.real, seg.imag], axis=1).astype(np.float32))
                waited = False
                while True:
                    timeout = None if tick >= n_buf else max(1e-4, ((tick + 1) * period - clock.now()) / clock.speed)
                    try:
                        q.put(item, timeout=timeout)
                        break
                    except queue.Full:
                        if not waited:
                            blocked[0] += 1
                            waited = True
                        tick = record_due(tick)
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)
        finally:
            q.put(None)

    def consumer():
        try:
            while True:
                item = q.get()
                if item is None:
                    return
                k, batch = item
                t0 = clock.now()
                y = np.asarray(model.predict(batch))
                t1 = clock.now()
                batch_times.append(t1 - t0)
                outputs[k] = (y[:, 0] + 1j * y[:, 1]).reshape(-1)
                done_times[k] = t1
                with lock:
                    processed[0] += BL
        except BaseException as exc:
            errors.append(exc)
            while q.get() is not None:
                pass

    threads = [threading.Thread(target=producer, name="buffer"), threading.Thread(target=consumer, name="inference")]
    clock.reset()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    if n_buf == 0:
        raise StreamError(f"duration {duration_s} s is shorter than one buffer ({period} s)")

    out = np.concatenate(outputs) if n_buf else np.zeros(0, dtype=np.complex128)
    tau = TauStats.from_batch_times(batch_times, B)
    inf = inference_time(tau.mean, B) if tau.mean > 0 else 1e-12
    thr = output_throughput(B, L, inf)
    if n_buf >= 4:
        d = np.diff(done_times[n_buf // 2 :])
        steady = float(np.mean(d)) if d.size else period
    else:
        steady = float(np.mean(np.diff([0.0] + done_times)))
    report = LatencyReport(
        batch_size=B,
        signal_length=L,
        sample_rate_hz=cfg.sample_rate_hz,
        buffer_latency_s=buffer_latency(B, L, cfg.sample_rate_hz),
        tau_stats=tau,
        inference_time_s=inf,
        output_throughput_hz=thr,
        input_throughput_hz=float(cfg.sample_rate_hz),
        realtime_feasible=bool(thr >= cfg.sample_rate_hz),
        first_sample_latency_s=done_times[0],
        steady_period_s=steady,
        samples_in=n_in,
        samples_out=int(out.size),
        samples_dropped_tail=n_in - int(out.size),
        producer_blocked=blocked[0],
        backlog_trace=trace,
    )
    return IqSignal(out.astype(np.complex128), cfg.sample_rate_hz), report


# -- batching sweep ---------------------------------------------------------------------


@dataclass
class SweepRow:
    batch_size: int
    status: str
    tau_p50_s: float = float("nan")
    tau_mean_s: float = float("nan")
    inference_time_s: float = float("nan")
    throughput_hz: float = float("nan")
    buffer_latency_s: float = float("nan")
    flatten: bool = False


SWEEP_FIELDS = ["batch_size", "status", "tau_p50_s", "tau_mean_s", "inference_time_s", "throughput_hz", "buffer_latency_s", "flatten"]


def batching_sweep(
    model,
    L: int,
    B_list: Sequence[int],
    trials: int = 10,
    warmup: int = 3,
    fs: float = 50_000.0,
    max_batch_bytes: Optional[int] = None,
    clock: Optional[Clock] = None,
) -> List[SweepRow]:
    """Measure ``tau(B, L)`` across batch sizes.

    ``flatten`` marks the first B whose throughput gain over the previous
    successful row is below 5%. Batches over ``max_batch_bytes`` (float32
    I/Q) or raising ``MemoryError`` become ``status="oom"`` rows.
    """
    if not B_list:
        raise StreamError("B_list must not be empty")
    rows: List[SweepRow] = []
    prev_thr = None
    flagged = False
    for B in B_list:
        if max_batch_bytes is not None and B * 2 * L * 4 > max_batch_bytes:
            rows.append(SweepRow(B, "oom", buffer_latency_s=buffer_latency(B, L, fs)))
            continue
        try:
            st = measure_tau(model, B, L, trials, warmup, clock)
        except MemoryError:
            rows.append(SweepRow(B, "oom", buffer_latency_s=buffer_latency(B, L, fs)))
            continue
        inf = inference_time(st.p50, B)
        thr = output_throughput(B, L, inf) if inf > 0 else float("inf")
        row = SweepRow(B, "ok", st.p50, st.mean, inf, thr, buffer_latency(B, L, fs))
        if prev_thr is not None and not flagged and thr < prev_thr * (1 + FLATTEN_GAIN):
            row.flatten = True
            flagged = True
        prev_thr = thr
        rows.append(row)
    return rows


def write_sweep_csv(path: Union[str, Path], rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def load_reference_tau() -> Dict:
    """Reference forward-pass times (ms) for comparison in reports; not host expectations."""
    from importlib import resources

    return json.loads(resources.files("rfreject.data").joinpath("reference_tau_ms.json").read_text())
