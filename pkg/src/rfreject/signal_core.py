"""Complex-baseband primitives.

Everything here is a pure function of its inputs. Signals are carried as
:class:`IqSignal` (complex128 samples plus a sample rate); DSP runs in double
precision and only the on-disk RFIQ format drops to float32.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
from scipy import signal as sps

RFIQ_MAGIC = b"RFIQ"
RFIQ_VERSION = 1
# magic(4s) version(u32) sample_rate_hz(f64), little endian
RFIQ_HEADER = struct.Struct("<4sId")


class SignalError(ValueError):
    """Raised when a signal operation's preconditions are violated."""


@dataclass(frozen=True)
class IqSignal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.complex128).reshape(-1)
        object.__setattr__(self, "samples", x)
        if not self.sample_rate_hz > 0:
            raise SignalError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(x)):
            raise SignalError("IqSignal samples must be finite (found NaN/Inf)")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2)) if self.samples.size else 0.0

    def with_samples(self, samples: np.ndarray) -> "IqSignal":
        return IqSignal(samples, self.sample_rate_hz)

    def to_channels(self) -> np.ndarray:
        """Stack real and imaginary parts as a ``(2, n)`` float array."""
        return np.stack([self.samples.real, self.samples.imag])

    @classmethod
    def from_channels(cls, channels: np.ndarray, sample_rate_hz: float) -> "IqSignal":
        channels = np.asarray(channels, dtype=np.float64)
        return cls(channels[0] + 1j * channels[1], sample_rate_hz)


@dataclass(frozen=True)
class FrequencyBand:
    """Band edges in Hz relative to the baseband center (half-open ``[low, high)``)."""

    low_hz: float
    high_hz: float

    def __post_init__(self):
        if not self.low_hz < self.high_hz:
            raise SignalError(f"band low_hz ({self.low_hz}) must be < high_hz ({self.high_hz})")

    @property
    def center_hz(self) -> float:
        return 0.5 * (self.low_hz + self.high_hz)

    @property
    def width_hz(self) -> float:
        return self.high_hz - self.low_hz

    def check_within(self, fs: float) -> None:
        if self.low_hz < -fs / 2 - 1e-9 or self.high_hz > fs / 2 + 1e-9:
            raise SignalError(
                f"band [{self.low_hz}, {self.high_hz}) Hz exceeds Nyquist range of fs={fs} Hz"
            )

    @classmethod
    def full(cls, fs: float) -> "FrequencyBand":
        return cls(-fs / 2, fs / 2)


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.taps, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "taps", h)
        if h.size % 2 == 0:
            raise SignalError(f"FIR filter needs an odd tap count, got {h.size}")
        if not np.all(np.isfinite(h)):
            raise SignalError("FIR taps must be finite")
        if not np.allclose(h, h[::-1], rtol=0, atol=1e-12 * max(1.0, np.abs(h).max())):
            raise SignalError("FIR taps must be symmetric (linear phase)")

    @property
    def group_delay(self) -> int:
        return (self.taps.size - 1) // 2

    def response(self, freqs_hz: np.ndarray, fs: float) -> np.ndarray:
        """Complex DTFT of the taps evaluated at ``freqs_hz``."""
        n = np.arange(self.taps.size)
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs
        return np.exp(-1j * np.outer(w, n)) @ self.taps


def _windowed_sinc(cutoff_hz: float, fs: float, num_taps: int) -> np.ndarray:
    n = np.arange(num_taps) - (num_taps - 1) / 2
    fc = cutoff_hz / fs
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(num_taps)
    h = 0.5 * (h + h[::-1])
    return h / h.sum()


def frequency_shift(x: IqSignal, delta_hz: float) -> IqSignal:
    fs = x.sample_rate_hz
    if abs(delta_hz) > fs / 2:
        raise SignalError(
            f"frequency shift of {delta_hz} Hz exceeds Nyquist ({fs / 2} Hz) for fs={fs} Hz"
        )
    if delta_hz == 0:
        return x
    n = np.arange(len(x))
    return x.with_samples(x.samples * np.exp(2j * np.pi * delta_hz * n / fs))


def design_lowpass(cutoff_hz: float, fs: float, num_taps: int = 101) -> FirFilter:
    """Hamming-windowed sinc lowpass with unit DC gain."""
    if num_taps % 2 == 0 or num_taps < 11:
        raise SignalError(f"num_taps must be odd and >= 11, got {num_taps}")
    if not 0 < cutoff_hz < fs / 2:
        raise SignalError(f"cutoff {cutoff_hz} Hz must lie in (0, {fs / 2}) for fs={fs}")
    return FirFilter(_windowed_sinc(cutoff_hz, fs, num_taps))


def filter_signal(x: IqSignal, h: FirFilter) -> IqSignal:
    """Linear convolution, delay-compensated so the output stays on the input timeline."""
    if len(x) == 0:
        raise SignalError("cannot filter an empty signal")
    full = sps.oaconvolve(x.samples, h.taps) if len(x) > 4 * h.taps.size else np.convolve(x.samples, h.taps)
    d = h.group_delay
    return x.with_samples(full[d : d + len(x)])


def resample(x: IqSignal, p: int, q: int, half_length: int = 10) -> IqSignal:
    """Rational resampling by ``p/q`` with a polyphase FIR.

    The anti-alias filter is a Hamming windowed sinc designed at the upsampled
    rate with ``2 * half_length * max(p, q) + 1`` taps.
    """
    if p < 1 or q < 1:
        raise SignalError(f"resample factors must be >= 1, got p={p}, q={q}")
    g = math.gcd(p, q)
    p, q = p // g, q // g
    fs_out = x.sample_rate_hz * p / q
    if p == q:
        return x
    n_in = len(x)
    n_out = -(-n_in * p // q)
    max_pq = max(p, q)
    num_taps = 2 * half_length * max_pq + 1
    h = _windowed_sinc(0.5 / max_pq, 1.0, num_taps) * p
    # pad the filter so its delay is a whole number of output samples
    half = (num_taps - 1) // 2
    pre = q - half % q
    skip = (half + pre) // q
    post = 0
    # upfirdn emits ((n_in - 1) * p + len(h) - 1) // q + 1 samples
    while ((n_in - 1) * p + pre + num_taps + post - 1) // q + 1 < n_out + skip:
        post += 1
    h = np.concatenate([np.zeros(pre), h, np.zeros(post)])
    y = sps.upfirdn(h, x.samples, up=p, down=q)
    return IqSignal(y[skip : skip + n_out], fs_out)


def rational_ratio(fs_in: float, fs_out: float, max_denominator: int = 10000) -> tuple:
    from fractions import Fraction

    r = Fraction(fs_out / fs_in).limit_denominator(max_denominator)
    return r.numerator, r.denominator


def resample_to(x: IqSignal, fs_out: float) -> IqSignal:
    p, q = rational_ratio(x.sample_rate_hz, fs_out)
    y = resample(x, p, q)
    return IqSignal(y.samples, fs_out)


def unit_normalize(x: IqSignal) -> IqSignal:
    rms = math.sqrt(x.power())
    if rms == 0.0:
        raise SignalError("cannot unit-normalize a zero-energy signal")
    return x.with_samples(x.samples / rms)


def band_mask(n: int, fs: float, band: FrequencyBand) -> np.ndarray:
    f = np.fft.fftfreq(n, 1.0 / fs)
    return (f >= band.low_hz) & (f < band.high_hz)


def inband_power(x: IqSignal, band: FrequencyBand) -> float:
    """Power contributed by FFT bins inside ``band`` (Parseval-scaled)."""
    band.check_within(x.sample_rate_hz)
    mask = band_mask(len(x), x.sample_rate_hz, band)
    if not mask.any():
        raise SignalError(f"band [{band.low_hz}, {band.high_hz}) Hz selects no FFT bins")
    X = np.fft.fft(x.samples)
    return float(np.sum(np.abs(X[mask]) ** 2) / len(x) ** 2)


def occupied_band(x: IqSignal, fraction: float = 0.99) -> FrequencyBand:
    """Smallest band (trimming equal tails) that holds ``fraction`` of the power."""
    n = len(x)
    P = np.fft.fftshift(np.abs(np.fft.fft(x.samples)) ** 2)
    f = np.fft.fftshift(np.fft.fftfreq(n, 1.0 / x.sample_rate_hz))
    c = np.cumsum(P) / P.sum()
    tail = (1.0 - fraction) / 2
    lo = int(np.searchsorted(c, tail))
    hi = int(np.searchsorted(c, 1.0 - tail))
    df = x.sample_rate_hz / n
    hi = min(hi, n - 1)
    return FrequencyBand(float(f[lo]), float(f[hi] + df))


def slice_signal(x: IqSignal, length: int) -> List[IqSignal]:
    if length < 1:
        raise SignalError(f"slice length must be >= 1, got {length}")
    count = len(x) // length
    return [x.with_samples(x.samples[i * length : (i + 1) * length]) for i in range(count)]


def write_rfiq(path: Union[str, Path], x: IqSignal) -> None:
    """Write ``x`` as RFIQ: 16-byte header then interleaved float32 I/Q, little endian."""
    inter = np.empty(2 * len(x), dtype="<f4")
    inter[0::2] = x.samples.real
    inter[1::2] = x.samples.imag
    with open(path, "wb") as fh:
        fh.write(RFIQ_HEADER.pack(RFIQ_MAGIC, RFIQ_VERSION, float(x.sample_rate_hz)))
        fh.write(inter.tobytes())


def read_rfiq(path: Union[str, Path]) -> IqSignal:
    raw = Path(path).read_bytes()
    if len(raw) < RFIQ_HEADER.size:
        raise SignalError(f"{path}: file too short for RFIQ header")
    magic, version, fs = RFIQ_HEADER.unpack_from(raw)
    if magic != RFIQ_MAGIC:
        raise SignalError(f"{path}: bad magic {magic!r}, expected {RFIQ_MAGIC!r}")
    if version != RFIQ_VERSION:
        raise SignalError(f"{path}: unsupported RFIQ version {version}")
    body = raw[RFIQ_HEADER.size :]
    if len(body) % 8:
        raise SignalError(f"{path}: payload is not a whole number of float32 I/Q pairs")
    inter = np.frombuffer(body, dtype="<f4")
    return IqSignal(inter[0::2].astype(np.float64) + 1j * inter[1::2].astype(np.float64), fs)


def quantize_c64(x: IqSignal) -> IqSignal:
    """Round samples through complex64, matching what RFIQ stores."""
    return x.with_samples(x.samples.astype(np.complex64).astype(np.complex128))
