"""Speech quality and intelligibility scores for reconstructed audio."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps
from scipy.fft import dct

from .signal_core import IqSignal, rational_ratio, resample
from .waveforms import AudioSignal

SDR_CAP_DB = 100.0
_MCD_K = 10.0 * math.sqrt(2.0) / math.log(10.0)


class MetricError(ValueError):
    pass


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)


def align(ref: AudioSignal, est: AudioSignal, max_lag: int = 400, floor: float = 0.05):
    """Find the lag ``d`` maximizing ``sum ref[n] est[n + d]`` with ``|d| <= max_lag``.

    Returns both signals trimmed to their common support and the lag
    (positive when ``est`` is delayed). A normalized correlation peak below
    ``floor`` falls back to lag 0 with a warning.
    """
    r, e = _samples(ref), _samples(est)
    n = min(r.size, e.size)
    r, e = r[:n], e[:n]
    xc = sps.correlate(e, r, mode="full", method="fft")
    lags = np.arange(-(n - 1), n)
    keep = np.abs(lags) <= max_lag
    xc, lags = xc[keep], lags[keep]
    best = int(np.argmax(xc))
    lag = int(lags[best])
    denom = math.sqrt(float(np.dot(r, r)) * float(np.dot(e, e))) or 1.0
    if xc[best] / denom < floor:
        warnings.warn(f"alignment correlation peak {xc[best] / denom:.3f} below floor {floor}; using lag 0")
        lag = 0
    if lag >= 0:
        r2, e2 = r[: n - lag], e[lag:]
    else:
        r2, e2 = r[-lag:], e[: n + lag]
    fs = ref.sample_rate_hz if isinstance(ref, AudioSignal) else 1.0
    return AudioSignal(r2, fs), AudioSignal(e2, fs), lag


def sdr(ref, est) -> float:
    """Scale-invariant SDR: the reference is scaled by the least-squares factor
    onto the estimate, and the remainder counts as distortion."""
    r, e = _samples(ref), _samples(est)
    if r.size != e.size:
        raise MetricError(f"sdr needs equal lengths, got {r.size} and {e.size}")
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise MetricError("sdr is undefined for a zero reference")
    alpha = float(np.dot(e, r)) / rr
    target = alpha * r
    noise = e - target
    num = float(np.dot(target, target))
    den = float(np.dot(noise, noise))
    if den == 0.0 or num == 0.0 and den == 0.0:
        return SDR_CAP_DB
    if num == 0.0:
        return -SDR_CAP_DB
    return float(min(SDR_CAP_DB, max(-SDR_CAP_DB, 10.0 * math.log10(num / den))))


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if x.size < frame:
        x = np.pad(x, (0, frame - x.size))
    return sliding_window_view(x, frame)[::hop]


def power_spectrogram(x: np.ndarray, frame: int = 512, hop: int = 128) -> np.ndarray:
    f = _frames(x, frame, hop) * np.hanning(frame)
    return np.abs(np.fft.rfft(f, axis=-1)) ** 2


def _floor(power: np.ndarray, dyn_range_db: float) -> float:
    # relative floor: bins far below a signal's own loudest bin carry no information.
    # Each signal gets its own floor so the distances stay symmetric and scale-equivariant.
    return max(float(power.max()) * 10.0 ** (-dyn_range_db / 10.0), 1e-20)


def _active(power: np.ndarray, active_range_db: float) -> np.ndarray:
    """Frames whose energy is within ``active_range_db`` of the loudest frame."""
    e = power.sum(axis=-1)
    return e > e.max() * 10.0 ** (-active_range_db / 10.0)


def lsd(ref, est, frame: int = 512, hop: int = 128, dyn_range_db: float = 60.0, active_range_db: float = 40.0) -> float:
    """Log-spectral distance in dB over frames active in either signal, each
    spectrum clamped ``dyn_range_db`` below its own peak bin."""
    pr = power_spectrogram(_samples(ref), frame, hop)
    pe = power_spectrogram(_samples(est), frame, hop)
    n = min(len(pr), len(pe))
    pr, pe = pr[:n], pe[:n]
    keep = _active(pr, active_range_db) | _active(pe, active_range_db)
    d = 10.0 * np.log10(np.maximum(pr[keep], _floor(pr, dyn_range_db)) / np.maximum(pe[keep], _floor(pe, dyn_range_db)))
    return float(np.mean(np.sqrt(np.mean(d * d, axis=-1))))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(num_mels: int, n_fft: int, fs: float, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular HTK-mel filters, ``(num_mels, n_fft // 2 + 1)``."""
    fmax = fs / 2 if fmax is None else fmax
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), num_mels + 2)
    hz = _mel_to_hz(mel_pts)
    freqs = np.linspace(0, fs / 2, n_fft // 2 + 1)
    fb = np.zeros((num_mels, freqs.size))
    for i in range(num_mels):
        lo, c, hi = hz[i], hz[i + 1], hz[i + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[i] = np.clip(np.minimum(up, down), 0, None)
    return fb


def mel_energies(x: np.ndarray, fs: float, num_mels: int = 40, frame: int = 512, hop: int = 128) -> np.ndarray:
    return power_spectrogram(x, frame, hop) @ mel_filterbank(num_mels, frame, fs).T


def mfcc(
    x: np.ndarray, fs: float, num_mels: int = 40, num_ceps: int = 13, frame: int = 512, hop: int = 128, floor: float = 1e-10
) -> np.ndarray:
    """Cepstra ``c1..c_num_ceps`` per frame (c0 dropped)."""
    mel = np.maximum(mel_energies(x, fs, num_mels, frame, hop), floor)
    c = dct(np.log(mel), type=2, axis=-1, norm="ortho")
    return c[:, 1 : num_ceps + 1]


def mel_cd(
    ref, est, num_mels: int = 40, num_ceps: int = 13, frame: int = 512, hop: int = 128, dyn_range_db: float = 60.0, active_range_db: float = 40.0
) -> float:
    """Mel-cepstral distance in dB over c1..c13, with the same per-signal floor and
    active-frame selection as :func:`lsd`."""
    fs = ref.sample_rate_hz if isinstance(ref, AudioSignal) else 8000.0
    mr = mel_energies(_samples(ref), fs, num_mels, frame, hop)
    me = mel_energies(_samples(est), fs, num_mels, frame, hop)
    cr = mfcc(_samples(ref), fs, num_mels, num_ceps, frame, hop, _floor(mr, dyn_range_db))
    ce = mfcc(_samples(est), fs, num_mels, num_ceps, frame, hop, _floor(me, dyn_range_db))
    n = min(len(cr), len(ce))
    keep = _active(mr[:n], active_range_db) | _active(me[:n], active_range_db)
    d = cr[:n][keep] - ce[:n][keep]
    return float(_MCD_K * np.mean(np.sqrt(np.sum(d * d, axis=-1))))


# -- STOI ----------------------------------------------------------------------

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_NFFT = 512
_STOI_BANDS = 15
_STOI_MINFREQ = 150.0
_STOI_SEGMENT = 30  # frames, 384 ms
_STOI_BETA = -15.0
_STOI_DYN_RANGE = 40.0


def third_octave_matrix(fs: int = _STOI_FS, nfft: int = _STOI_NFFT, num_bands: int = _STOI_BANDS, min_freq: float = _STOI_MINFREQ):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float, frame: int, hop: int):
    w = np.hanning(frame + 2)[1:-1]
    n_frames = (x.size - frame) // hop + 1
    if n_frames < 1:
        return x, y
    xf = np.stack([w * x[i * hop : i * hop + frame] for i in range(n_frames)])
    yf = np.stack([w * y[i * hop : i * hop + frame] for i in range(n_frames)])
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    out_len = (n - 1) * hop + frame if n else 0
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i in range(n):
        xs[i * hop : i * hop + frame] += xf[i]
        ys[i * hop : i * hop + frame] += yf[i]
    return xs, ys


def _stft_mag(x: np.ndarray, frame: int, hop: int, nfft: int) -> np.ndarray:
    w = np.hanning(frame + 2)[1:-1]
    n_frames = (x.size - frame) // hop + 1
    frames = np.stack([w * x[i * hop : i * hop + frame] for i in range(max(n_frames, 0))]) if n_frames > 0 else np.zeros((0, frame))
    return np.abs(np.fft.rfft(frames, n=nfft, axis=-1))


def _to_rate(x: np.ndarray, fs: float, fs_out: float) -> np.ndarray:
    if fs == fs_out:
        return x
    p, q = rational_ratio(fs, fs_out)
    return resample(IqSignal(x.astype(np.complex128), fs), p, q).samples.real


def stoi(ref, est, fs: Optional[float] = None) -> float:
    """Short-time objective intelligibility (classic, non-extended form)."""
    if fs is None:
        fs = ref.sample_rate_hz if isinstance(ref, AudioSignal) else _STOI_FS
    x, y = _samples(ref), _samples(est)
    if x.size != y.size:
        raise MetricError(f"stoi needs equal lengths, got {x.size} and {y.size}")
    if x.size / fs < 0.5:
        raise MetricError(f"stoi needs at least 0.5 s of audio, got {x.size / fs:.3f} s")
    if not np.any(x):
        raise MetricError("stoi is undefined for an all-silent reference")
    x = _to_rate(x, fs, _STOI_FS)
    y = _to_rate(y, fs, _STOI_FS)
    x, y = _remove_silent_frames(x, y, _STOI_DYN_RANGE, _STOI_FRAME, _STOI_FRAME // 2)
    obm = third_octave_matrix()
    X = _stft_mag(x, _STOI_FRAME, _STOI_FRAME // 2, _STOI_NFFT).T
    Y = _stft_mag(y, _STOI_FRAME, _STOI_FRAME // 2, _STOI_NFFT).T
    if X.shape[1] < _STOI_SEGMENT:
        raise MetricError(
            f"too few non-silent frames ({X.shape[1]}) for one {_STOI_SEGMENT}-frame STOI segment"
        )
    xb = np.sqrt(obm @ X**2)
    yb = np.sqrt(obm @ Y**2)
    clip = 10 ** (-_STOI_BETA / 20)
    eps = np.finfo(float).eps
    scores = []
    for m in range(_STOI_SEGMENT, X.shape[1] + 1):
        xs = xb[:, m - _STOI_SEGMENT : m]
        ys = yb[:, m - _STOI_SEGMENT : m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yn = np.minimum(ys * alpha, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yn - yn.mean(axis=1, keepdims=True)
        num = np.sum(xc * yc, axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps
        scores.append(num / den)
    return float(np.mean(scores))


# -- reports -------------------------------------------------------------------


def load_band_thresholds(path: Optional[str] = None) -> Dict[str, dict]:
    if path is None:
        text = resources.files("rfreject.data").joinpath("metric_bands.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


def band_label(metric: str, value: float, thresholds: Dict[str, dict]) -> str:
    t = thresholds[metric]
    if t["higher_is_better"]:
        return "good" if value >= t["good"] else "fair" if value >= t["fair"] else "poor"
    return "good" if value <= t["good"] else "fair" if value <= t["fair"] else "poor"


@dataclass
class MetricReport:
    sdr_db: float
    lsd_db: float
    mel_cd: float
    stoi: float
    lag: int
    bands: Dict[str, str] = field(default_factory=dict)
    # filled by external tools when available
    pesq: Optional[float] = None
    estoi: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    CSV_FIELDS = ("sdr_db", "lsd_db", "mel_cd", "stoi")


def score(ref: AudioSignal, est: AudioSignal, max_lag: int = 400, thresholds: Optional[Dict[str, dict]] = None) -> MetricReport:
    """Align, then compute every metric and its good/fair/poor label."""
    r, e, lag = align(ref, est, max_lag)
    thresholds = thresholds or load_band_thresholds()
    rep = MetricReport(
        sdr_db=sdr(r, e),
        lsd_db=lsd(r, e),
        mel_cd=mel_cd(r, e),
        stoi=stoi(r, e),
        lag=lag,
    )
    rep.bands = {m: band_label(m, getattr(rep, m), thresholds) for m in MetricReport.CSV_FIELDS}
    return rep
