import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfreject.metrics import (
    MetricError,
    MetricReport,
    align,
    band_label,
    load_band_thresholds,
    lsd,
    mel_cd,
    score,
    sdr,
    stoi,
)
from rfreject.waveforms import AudioSignal, speech_like_audio

FS = 8000.0


def multitone(seconds=3.0, fs=FS, seed=0):
    """Amplitude-modulated multitone with syllable-rate gating."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * fs)) / fs
    x = sum(rng.uniform(0.3, 1) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (220, 500, 900, 1700, 2600))
    env = np.clip(np.sin(2 * np.pi * 4 * t), 0, None)
    return AudioSignal(0.5 * x / np.abs(x).max() * env, fs)


def with_noise(a, snr_db, seed=0):
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(len(a))
    n *= np.sqrt(np.mean(a.samples**2) / np.mean(n**2) * 10 ** (-snr_db / 10))
    return AudioSignal(a.samples + n, a.sample_rate_hz)


def test_align_recovers_delay():
    a = speech_like_audio(1.0, seed=1)
    d = np.concatenate([np.zeros(37), a.samples[:-37]])
    r2, e2, lag = align(a, AudioSignal(d, FS))
    assert lag == 37 and len(r2) == len(e2) == len(a) - 37
    assert np.array_equal(r2.samples, e2.samples)
    assert align(a, a)[2] == 0
    early = AudioSignal(np.concatenate([a.samples[20:], np.zeros(20)]), FS)
    assert align(a, early)[2] == -20


def test_align_low_correlation_warns():
    rng = np.random.default_rng(0)
    a, b = AudioSignal(rng.standard_normal(4000), FS), AudioSignal(rng.standard_normal(4000), FS)
    with pytest.warns(UserWarning, match="floor"):
        assert align(a, b, floor=0.5)[2] == 0


def test_sdr_examples():
    a = speech_like_audio(1.0, seed=2)
    assert sdr(a, a) == 100.0
    assert sdr(a, AudioSignal(2 * a.samples, FS)) == 100.0
    vals = [sdr(a, with_noise(a, 10.0, seed)) for seed in range(10)]
    assert abs(np.mean(vals) - 10.0) <= 0.1
    with pytest.raises(MetricError):
        sdr(np.zeros(10), np.ones(10))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 100))
def test_sdr_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    r, e = rng.standard_normal(500), rng.standard_normal(500)
    assert sdr(r, c * e) == pytest.approx(sdr(r, e), abs=1e-9)


def test_lsd_examples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(16000)
    assert lsd(x, x) <= 1e-6
    assert lsd(x, 10 * x) == pytest.approx(20.0, abs=1e-9)
    from scipy.signal import firwin, lfilter

    lp = lfilter(firwin(101, 0.25), 1.0, x)
    assert lsd(x, lp) > 1.0


def test_mel_cd_examples():
    a = multitone()
    assert mel_cd(a, a) == 0.0
    assert mel_cd(a, AudioSignal(3.0 * a.samples, FS)) <= 1e-9
    t = np.arange(16000) / FS
    t440, t880 = AudioSignal(np.sin(2 * np.pi * 440 * t), FS), AudioSignal(np.sin(2 * np.pi * 880 * t), FS)
    assert mel_cd(t440, t880) > 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(-5, 20))
def test_lsd_and_mel_cd_symmetric(seed, snr):
    a = multitone(1.0, seed=seed % 7)
    b = with_noise(a, snr, seed)
    assert lsd(a, b) == pytest.approx(lsd(b, a), rel=1e-12)
    assert mel_cd(a, b) == pytest.approx(mel_cd(b, a), rel=1e-12)


def test_stoi_examples():
    a = multitone()
    assert stoi(a, a) >= 0.99
    noisy = stoi(a, with_noise(a, -10.0))
    assert noisy <= 0.6
    s20, s0, sm10 = (stoi(a, with_noise(a, snr, seed=5)) for snr in (20.0, 0.0, -10.0))
    assert s20 >= s0 >= sm10
    assert -1 <= sm10 <= 1


def test_stoi_errors():
    with pytest.raises(MetricError, match="silent"):
        stoi(AudioSignal(np.zeros(8000), FS), AudioSignal(np.ones(8000), FS))
    with pytest.raises(MetricError, match="0.5 s"):
        stoi(AudioSignal(np.ones(1000), FS), AudioSignal(np.ones(1000), FS))


def test_metrics_deterministic():
    a, b = multitone(seed=1), with_noise(multitone(seed=1), 5.0)
    r1, r2 = score(a, b), score(a, b)
    assert r1.to_dict() == r2.to_dict()


def test_band_thresholds_and_labels():
    th = load_band_thresholds()
    assert th["stoi"]["good"] == 0.75 and th["stoi"]["fair"] == 0.45
    assert th["sdr_db"]["good"] == 10 and th["sdr_db"]["fair"] == 0
    assert th["lsd_db"]["good"] == 1 and th["lsd_db"]["fair"] == 2.5
    assert th["mel_cd"]["good"] == 4 and th["mel_cd"]["fair"] == 8
    assert band_label("stoi", 0.8, th) == "good"
    assert band_label("stoi", 0.5, th) == "fair"
    assert band_label("lsd_db", 3.0, th) == "poor"
    assert band_label("mel_cd", 4.0, th) == "good"


def test_custom_thresholds_file(tmp_path):
    th = load_band_thresholds()
    th["sdr_db"]["good"] = 200.0
    path = tmp_path / "bands.json"
    path.write_text(json.dumps(th))
    a = multitone()
    rep = score(a, a, thresholds=load_band_thresholds(str(path)))
    assert rep.bands["sdr_db"] == "fair"


def test_report_serialization():
    a = multitone(seed=2)
    rep = score(a, with_noise(a, 10.0))
    d = json.loads(rep.to_json())
    assert set(MetricReport.CSV_FIELDS) <= set(d) and d["pesq"] is None
    assert np.isfinite(rep.stoi)
