"""Classical separators: bandpass+discriminator matched filter, windowed LMMSE, passthrough."""
from __future__ import annotations

import time
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg

from ..signal_core import (
    FrequencyBand,
    IqSignal,
    band_mask,
    design_lowpass,
    filter_signal,
    frequency_shift,
)
from ..waveforms import AudioSignal, FmConfig, fm_demodulate


def bandpass(x: IqSignal, band: FrequencyBand, num_taps: int = 129) -> IqSignal:
    """FIR bandpass: move the band center to DC, lowpass at half the width, move back."""
    center = band.center_hz
    half = band.width_hz / 2
    y = frequency_shift(x, -center) if center else x
    y = filter_signal(y, design_lowpass(half, x.sample_rate_hz, num_taps))
    return frequency_shift(y, center) if center else y


def bandpass_projection(x: np.ndarray, band: FrequencyBand, fs: float) -> np.ndarray:
    """Ideal FFT-mask projection onto ``band`` along the last axis."""
    X = np.fft.fft(x, axis=-1)
    X = X * band_mask(x.shape[-1], fs, band)
    return np.fft.ifft(X, axis=-1)


def matched_filter_baseline(mixture: IqSignal, soi_band: FrequencyBand, fm_cfg: FmConfig = FmConfig()) -> AudioSignal:
    return fm_demodulate(bandpass(mixture, soi_band), fm_cfg)


class LmmseError(np.linalg.LinAlgError):
    pass


def sample_covariance(slices: Iterable[IqSignal], window: int) -> np.ndarray:
    """Complex ``M x M`` covariance ``E[w w^H]`` over non-overlapping length-``M`` windows."""
    acc = np.zeros((window, window), dtype=np.complex128)
    n = 0
    for s in slices:
        x = s.samples if isinstance(s, IqSignal) else np.asarray(s)
        k = x.size // window
        if k == 0:
            continue
        w = x[: k * window].reshape(k, window)
        acc += w.T @ w.conj()
        n += k
    if n == 0:
        raise ValueError(f"no complete length-{window} windows to estimate a covariance from")
    return acc / n


def lmmse_filter(C_s: np.ndarray, C_b: np.ndarray, loading: float = 1e-9) -> np.ndarray:
    """Estimator matrix ``C_s (C_s + C_b)^-1`` via a Hermitian solve (no explicit inverse)."""
    M = C_s.shape[0]
    if C_s.shape != (M, M) or C_b.shape != (M, M):
        raise ValueError(f"covariances must both be square and equal size, got {C_s.shape} and {C_b.shape}")
    A = C_s + C_b
    A = A + loading * (np.trace(A).real / M) * np.eye(M)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise LmmseError(f"C_s + C_b is singular after diagonal loading (condition ~ {cond:.3e})")
    # W = C_s A^-1  <=>  A^H W^H = C_s^H, and A is Hermitian
    return scipy.linalg.solve(A, C_s.conj().T, assume_a="her").conj().T


def lmmse_baseline(
    mixture: IqSignal,
    C_s: np.ndarray,
    C_b: np.ndarray,
    loading: float = 1e-9,
) -> IqSignal:
    """Apply the LMMSE estimator per non-overlapping window; a short tail passes through."""
    M = C_s.shape[0]
    Wmat = lmmse_filter(C_s, C_b, loading)
    y = mixture.samples
    k = y.size // M
    out = y.copy()
    if k:
        blocks = y[: k * M].reshape(k, M)
        out[: k * M] = (blocks @ Wmat.T).reshape(-1)
    return mixture.with_samples(out)


def time_lmmse_solve(M: int, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time to build the ``M x M`` estimator from covariances."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((M, 2 * M)) + 1j * rng.standard_normal((M, 2 * M))
    C_s = G @ G.conj().T / (2 * M)
    H = rng.standard_normal((M, 2 * M)) + 1j * rng.standard_normal((M, 2 * M))
    C_b = H @ H.conj().T / (2 * M)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        lmmse_filter(C_s, C_b)
        best = min(best, time.perf_counter() - t0)
    return best


class LmmseSeparator:
    """Windowed LMMSE packaged like the neural separators (``(B, 2, L)`` in and out)."""

    kind = "lmmse"

    def __init__(self, C_s: np.ndarray, C_b: np.ndarray, loading: float = 1e-9):
        self.window = C_s.shape[0]
        self.matrix = lmmse_filter(C_s, C_b, loading)

    def predict(self, mixture: np.ndarray) -> np.ndarray:
        x = np.asarray(mixture, dtype=np.float64)
        z = x[:, 0] + 1j * x[:, 1]
        B, L = z.shape
        M = self.window
        k = L // M
        out = z.copy()
        if k:
            out[:, : k * M] = (z[:, : k * M].reshape(B, k, M) @ self.matrix.T).reshape(B, k * M)
        return np.stack([out.real, out.imag], axis=1).astype(np.float32)


class Passthrough:
    kind = "passthrough"

    def predict(self, mixture: np.ndarray) -> np.ndarray:
        return np.array(mixture, copy=True)
