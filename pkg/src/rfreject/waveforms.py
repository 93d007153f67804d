"""Signal generators: narrowband FM voice, simplified OFDM downlink, WAV audio I/O."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.io import wavfile

from .signal_core import (
    IqSignal,
    SignalError,
    design_lowpass,
    filter_signal,
    rational_ratio,
    resample,
)


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        a = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "samples", a)
        if not self.sample_rate_hz > 0:
            raise SignalError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(a)):
            raise SignalError("audio samples must be finite")

    @property
    def clipped(self) -> bool:
        return bool(self.samples.size and np.abs(self.samples).max() > 1.0)

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class FmConfig:
    """Narrowband voice FM. Defaults follow handheld-radio NBFM convention (assumed)."""

    deviation_hz: float = 5000.0
    audio_rate_hz: float = 8000.0
    rf_rate_hz: float = 50000.0
    audio_cutoff_hz: float = 3600.0
    filter_taps: int = 201

    def __post_init__(self):
        if not 0 < self.deviation_hz < self.rf_rate_hz / 2:
            raise SignalError(
                f"deviation_hz={self.deviation_hz} must be in (0, rf_rate_hz/2={self.rf_rate_hz / 2})"
            )
        if self.rf_rate_hz < self.audio_rate_hz:
            raise SignalError("rf_rate_hz must be >= audio_rate_hz")
        if not 0 < self.audio_cutoff_hz < self.audio_rate_hz / 2:
            raise SignalError("audio_cutoff_hz must lie below the audio Nyquist rate")


QAM_ORDERS = (4, 16, 64)


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 64
    num_active_subcarriers: int = 48
    cp_length: int = 16
    subcarrier_spacing_hz: float = 15000.0
    qam_order: int = 4
    num_symbols: int = 100
    seed: int = 0

    def __post_init__(self):
        n = self.fft_size
        if n < 2 or n & (n - 1):
            raise SignalError(f"fft_size must be a power of two, got {n}")
        if not 1 <= self.num_active_subcarriers <= n - 1:
            raise SignalError(
                f"num_active_subcarriers must be in [1, fft_size-1={n - 1}], "
                f"got {self.num_active_subcarriers}"
            )
        if not 0 <= self.cp_length < n:
            raise SignalError(f"cp_length must be in [0, fft_size), got {self.cp_length}")
        if self.qam_order not in QAM_ORDERS:
            raise SignalError(f"qam_order must be one of {QAM_ORDERS}, got {self.qam_order}")
        if self.num_symbols < 1:
            raise SignalError("num_symbols must be >= 1")
        if not self.subcarrier_spacing_hz > 0:
            raise SignalError("subcarrier_spacing_hz must be positive")

    @property
    def sample_rate_hz(self) -> float:
        return self.fft_size * self.subcarrier_spacing_hz

    @property
    def symbol_length(self) -> int:
        return self.fft_size + self.cp_length

    @property
    def occupied_bandwidth_hz(self) -> float:
        return self.num_active_subcarriers * self.subcarrier_spacing_hz


def _resample_audio(a: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    if fs_in == fs_out:
        return a
    p, q = rational_ratio(fs_in, fs_out)
    return resample(IqSignal(a.astype(np.complex128), fs_in), p, q).samples.real


def fm_modulate(a: AudioSignal, cfg: FmConfig = FmConfig()) -> IqSignal:
    """Phase-accumulating FM modulator with a unit-magnitude envelope."""
    x = _resample_audio(a.samples, a.sample_rate_hz, cfg.rf_rate_hz)
    phase = np.cumsum(2 * np.pi * cfg.deviation_hz * x / cfg.rf_rate_hz)
    return IqSignal(np.exp(1j * phase), cfg.rf_rate_hz)


def discriminate(x: np.ndarray, fs: float, deviation_hz: float) -> np.ndarray:
    """Quadrature discriminator; output is normalized instantaneous frequency.

    Sample 0 repeats sample 1 so the output keeps the input length.
    """
    out = np.zeros(x.size)
    if x.size < 2:
        return out
    d = np.angle(x[1:] * np.conj(x[:-1]))
    out[1:] = d * fs / (2 * np.pi * deviation_hz)
    out[0] = out[1]
    return out


def fm_demodulate(x: IqSignal, cfg: FmConfig = FmConfig()) -> AudioSignal:
    if len(x) == 0:
        raise SignalError("cannot demodulate an empty signal")
    fs = x.sample_rate_hz
    a = discriminate(x.samples, fs, cfg.deviation_hz)
    lp = design_lowpass(cfg.audio_cutoff_hz, fs, cfg.filter_taps)
    a = filter_signal(IqSignal(a.astype(np.complex128), fs), lp).samples.real
    return AudioSignal(_resample_audio(a, fs, cfg.audio_rate_hz), cfg.audio_rate_hz)


# -- OFDM ------------------------------------------------------------------


def qam_constellation(order: int) -> np.ndarray:
    m = int(round(math.sqrt(order)))
    levels = np.arange(-(m - 1), m, 2, dtype=np.float64)
    points = (levels[:, None] + 1j * levels[None, :]).reshape(-1)
    return points / np.sqrt(np.mean(np.abs(points) ** 2))


def active_bins(cfg: OfdmConfig) -> np.ndarray:
    """FFT bin indices of the active subcarriers, DC excluded, lowest frequency first."""
    n_neg = cfg.num_active_subcarriers // 2
    n_pos = cfg.num_active_subcarriers - n_neg
    neg = np.arange(-n_neg, 0)
    pos = np.arange(1, n_pos + 1)
    return np.concatenate([neg, pos]) % cfg.fft_size


def _ofdm_scale(cfg: OfdmConfig) -> float:
    # unit mean power per time-domain sample
    return cfg.fft_size / math.sqrt(cfg.num_active_subcarriers)


def ofdm_generate(cfg: OfdmConfig = OfdmConfig()) -> Tuple[IqSignal, np.ndarray]:
    """Fill every resource element with seeded QAM symbols and modulate.

    Returns the time signal and the ``(num_symbols, num_active_subcarriers)``
    symbol grid.
    """
    rng = np.random.default_rng(cfg.seed)
    const = qam_constellation(cfg.qam_order)
    grid = const[rng.integers(0, cfg.qam_order, size=(cfg.num_symbols, cfg.num_active_subcarriers))]
    X = np.zeros((cfg.num_symbols, cfg.fft_size), dtype=np.complex128)
    X[:, active_bins(cfg)] = grid
    body = np.fft.ifft(X, axis=1) * _ofdm_scale(cfg)
    cp = body[:, cfg.fft_size - cfg.cp_length :]
    sym = np.concatenate([cp, body], axis=1)
    return IqSignal(sym.reshape(-1), cfg.sample_rate_hz), grid


def ofdm_demodulate(x: IqSignal, cfg: OfdmConfig, hard: bool = True) -> np.ndarray:
    """Strip CPs, FFT, and read the active bins (optionally slicing to the constellation)."""
    n_sym = len(x) // cfg.symbol_length
    sym = x.samples[: n_sym * cfg.symbol_length].reshape(n_sym, cfg.symbol_length)
    Y = np.fft.fft(sym[:, cfg.cp_length :], axis=1) / _ofdm_scale(cfg)
    soft = Y[:, active_bins(cfg)]
    if not hard:
        return soft
    const = qam_constellation(cfg.qam_order)
    idx = np.argmin(np.abs(soft[..., None] - const[None, None, :]), axis=-1)
    return const[idx]


def write_grid_csv(path: Union[str, Path], grid: np.ndarray) -> None:
    """Dump a symbol grid as CSV rows of (symbol, subcarrier, re, im)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["symbol", "subcarrier", "re", "im"])
        for (i, k), v in np.ndenumerate(grid):
            w.writerow([i, k, repr(float(v.real)), repr(float(v.imag))])


# -- WAV -------------------------------------------------------------------


def wav_read(path: Union[str, Path]) -> AudioSignal:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            fs, data = wavfile.read(str(path))
    except (ValueError, EOFError, OSError) as exc:
        raise WavFormatError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: only mono WAV is supported, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        a = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        a = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample encoding {data.dtype} (need int16 or float32)")
    return AudioSignal(a, float(fs))


def wav_write(path: Union[str, Path], a: AudioSignal, encoding: str = "pcm16") -> None:
    fs = int(round(a.sample_rate_hz))
    if fs != a.sample_rate_hz:
        raise WavFormatError("WAV requires an integer sample rate")
    if encoding == "pcm16":
        data = np.clip(np.round(a.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = a.samples.astype(np.float32)
    else:
        raise WavFormatError(f"unknown WAV encoding {encoding!r} (pcm16|float32)")
    wavfile.write(str(path), fs, data)


def speech_like_audio(
    duration_s: float,
    fs: float = 8000.0,
    seed: int = 0,
    peak: float = 0.9,
) -> AudioSignal:
    """Synthetic voiced speech stand-in.

    A harmonic series on a gliding pitch contour (110-230 Hz), shaped by two
    slowly moving formant resonances and gated by a 3-5 Hz syllable envelope
    with pauses, over a faint band-limited noise floor. Voiced content stays below 3.4 kHz.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    # pitch contour: random walk through a few knots
    knots = max(2, int(duration_s * 3) + 2)
    f0_knots = rng.uniform(110, 230, size=knots)
    f0 = np.interp(t, np.linspace(0, duration_s, knots), f0_knots)
    phase0 = 2 * np.pi * np.cumsum(f0) / fs
    formant1 = np.interp(t, np.linspace(0, duration_s, knots), rng.uniform(400, 900, size=knots))
    formant2 = np.interp(t, np.linspace(0, duration_s, knots), rng.uniform(1100, 2400, size=knots))
    x = np.zeros(n)
    for h in range(1, 40):
        fh = h * f0
        amp = (
            np.exp(-0.5 * ((fh - formant1) / 180.0) ** 2)
            + 0.6 * np.exp(-0.5 * ((fh - formant2) / 250.0) ** 2)
            + 0.05 / h
        )
        amp = np.where(fh < 3400.0, amp, 0.0)
        x += amp * np.sin(h * phase0 + rng.uniform(0, 2 * np.pi))
    # syllable envelope with silent gaps
    syl_rate = rng.uniform(3.0, 5.0)
    env = np.clip(np.sin(2 * np.pi * syl_rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 0.7
    gate_knots = max(2, int(duration_s * 2) + 2)
    gate = np.interp(t, np.linspace(0, duration_s, gate_knots), (rng.uniform(size=gate_knots) > 0.2).astype(float))
    x *= env * gate
    x *= peak / max(np.abs(x).max(), 1e-12)
    # breath/room noise floor about 60 dB below peak keeps silences non-degenerate;
    # band-limited like the voice so nothing lives above the demodulator cutoff
    spec = np.fft.rfft(rng.standard_normal(n))
    spec[np.fft.rfftfreq(n, 1.0 / fs) >= 3400.0] = 0.0
    floor = np.fft.irfft(spec, n)
    x += 1e-3 * peak * floor / max(float(np.std(floor)), 1e-12)
    x = np.clip(x, -peak, peak)
    return AudioSignal(x, fs)
