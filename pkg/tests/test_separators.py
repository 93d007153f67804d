import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfreject.autograd import Tensor, rotary
from rfreject.separators import (
    DecoderConfig,
    LmmseError,
    LmmseSeparator,
    Passthrough,
    RFDecoder,
    RFWaveNet,
    WaveNetConfig,
    bandpass,
    bandpass_projection,
    build_model,
    lmmse_baseline,
    lmmse_filter,
    load_model,
    matched_filter_baseline,
    sample_covariance,
    time_lmmse_solve,
)
from rfreject.separators.decoder import band_mask
from rfreject.separators.training import TrainingDiverged, passthrough_mse, train
from rfreject.mixing import DatasetSpec, build_dataset, mix_at_sinr
from rfreject.signal_core import FrequencyBand, IqSignal
from rfreject.waveforms import FmConfig, fm_demodulate, fm_modulate, speech_like_audio

TINY = DecoderConfig(num_layers=2, hidden_dim=16, num_heads=2, window=8, context=4, seed=1)


def rand_mix(seed, B=2, L=64):
    return np.random.default_rng(seed).standard_normal((B, 2, L)).astype(np.float32)


# -- decoder ---------------------------------------------------------------


def test_band_mask_shape_and_values():
    m = band_mask(6, 3)
    assert np.all(np.isneginf(m[np.triu_indices(6, 1)]))
    assert m[5, 3] == 0 and m[5, 2] == -np.inf and m[2, 0] == 0


def test_masked_attention_weights_are_zero_in_the_future():
    m = band_mask(5, 5)
    logits = np.random.default_rng(0).standard_normal((5, 5)) + m
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    assert np.all(w[np.triu_indices(5, 1)] <= 1e-9)


def test_decoder_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(hidden_dim=30, num_heads=4)
    with pytest.raises(ValueError):
        DecoderConfig(hidden_dim=12, num_heads=4)  # head dim 3 is odd


def test_decoder_rejects_indivisible_length():
    m = RFDecoder(TINY)
    x = rand_mix(0, L=60)
    with pytest.raises(ValueError, match="divisible"):
        m.forward(x, x)


FULL = DecoderConfig(num_layers=2, hidden_dim=16, num_heads=2, window=8, context=4, input_norm=True, linear_skip=True, seed=2)


@pytest.mark.parametrize("cfg", [TINY, FULL])
def test_decoder_teacher_forced_causality(cfg):
    m = RFDecoder(cfg)
    x, s = rand_mix(1), rand_mix(2)
    y0 = m.forward(x, s).data
    W = cfg.window
    for t in (0, 3, 6):
        x2, s2 = x.copy(), s.copy()
        x2[..., (t + 1) * W :] += 5.0
        # the SOI window t is only visible to token t+1, so perturb from t+1 too
        s2[..., (t + 1) * W :] -= 3.0
        y1 = m.forward(x2, s2).data
        assert np.array_equal(y0[..., : (t + 1) * W], y1[..., : (t + 1) * W])


def test_decoder_free_running_causality():
    m = RFDecoder(TINY)
    x = rand_mix(3)
    y0 = m.predict(x)
    x[..., 40:] = 0.0
    y1 = m.predict(x)
    assert np.array_equal(y0[..., :40], y1[..., :40])


@pytest.mark.parametrize("extra", [{}, dict(input_norm=True), dict(linear_skip=True)])
def test_stream_matches_batch_with_teacher_feedback(extra):
    cfg = DecoderConfig(num_layers=2, hidden_dim=16, num_heads=2, window=8, context=4, seed=3, **extra)
    m = RFDecoder(cfg)
    # randomize the zero-initialized skip path so it takes part in the comparison
    rng = np.random.default_rng(0)
    for p in m.parameters():
        p.data += 0.05 * rng.standard_normal(p.shape).astype(np.float32)
    x, s = rand_mix(4, B=2, L=80), rand_mix(5, B=2, L=80)
    batch = m.forward(x, s).data
    state = m.stream_reset(2)
    W = cfg.window
    outs = []
    for t in range(10):
        fb = None if t == 0 else s[..., (t - 1) * W : t * W]
        y, state = m.stream_step(state, x[..., t * W : (t + 1) * W], feedback=fb)
        outs.append(y)
        assert state.cache_length <= cfg.context
    assert np.max(np.abs(np.concatenate(outs, axis=-1) - batch)) <= 1e-5


def test_stream_reset_and_eviction():
    m = RFDecoder(TINY)
    st_ = m.stream_reset(1)
    assert st_.position == 0 and st_.cache_length == 0
    for t in range(TINY.context + 10):
        _, st_ = m.stream_step(st_, np.zeros((2, TINY.window), np.float32))
        assert st_.cache_length == min(t + 1, TINY.context)
    assert st_.position == TINY.context + 10
    with pytest.raises(ValueError):
        m.stream_step(st_, np.zeros((2, TINY.window + 1), np.float32))


def test_untrained_decoder_output_finite():
    m = RFDecoder(TINY)
    assert np.all(np.isfinite(m.predict(rand_mix(7))))


@pytest.mark.parametrize("p,delta", [(0, 1), (3, 2), (10, 5), (7, 0), (100, 13)])
def test_rotary_relative_position(p, delta):
    rng = np.random.default_rng(p + delta)
    q, k = rng.standard_normal((1, 1, 16)), rng.standard_normal((1, 1, 16))
    a = np.sum(rotary(Tensor(q), [p]).data * rotary(Tensor(k), [p + delta]).data)
    b = np.sum(rotary(Tensor(q), [0]).data * rotary(Tensor(k), [delta]).data)
    assert a == pytest.approx(b, abs=1e-5)
    assert np.array_equal(rotary(Tensor(q), [0]).data, q.astype(np.float32))
    assert np.linalg.norm(rotary(Tensor(q), [p]).data) == pytest.approx(np.linalg.norm(q), abs=1e-5)


def test_rotary_rejects_odd_head_dim():
    with pytest.raises(ValueError):
        rotary(Tensor(np.zeros((1, 3))), [0])


# -- parameter audit ---------------------------------------------------------


def test_full_scale_parameter_counts():
    wn = RFWaveNet(WaveNetConfig.full_scale())
    assert wn.num_parameters() == 3_964_674
    assert wn.cfg.receptive_field == 6139
    dec = RFDecoder(DecoderConfig.full_scale())
    assert abs(dec.num_parameters() - 38_913_760) / 38_913_760 <= 0.02


def test_receptive_field_formula():
    cfg = WaveNetConfig(kernel_size=2, num_blocks=10, dilation_cycle=[2**i for i in range(10)])
    assert cfg.receptive_field == 1024 == 1 + sum(2**i for i in range(10))


# -- wavenet -----------------------------------------------------------------


def test_wavenet_zero_head_gives_zero_output():
    m = RFWaveNet(WaveNetConfig(residual_channels=8, num_blocks=3, dilation_cycle=[1, 2, 4], zero_init_head=True))
    assert np.array_equal(m.predict(np.zeros((1, 2, 32), np.float32)), np.zeros((1, 2, 32)))


def test_wavenet_length_preserved_and_short_input_warns():
    m = RFWaveNet(WaveNetConfig(residual_channels=8, num_blocks=4, dilation_cycle=[1, 2, 4, 8]))
    with pytest.warns(UserWarning, match="receptive field"):
        y = m.predict(rand_mix(0, L=10))
    assert y.shape == (2, 2, 10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 47))
def test_wavenet_causality(t):
    m = RFWaveNet(WaveNetConfig(residual_channels=8, num_blocks=4, dilation_cycle=[1, 2, 4, 8], seed=1))
    x = rand_mix(1, L=48)
    y0 = m.predict(x)
    x[..., t + 1 :] += 1.0
    y1 = m.predict(x)
    assert np.array_equal(y0[..., : t + 1], y1[..., : t + 1])


def test_wavenet_noncausal_sees_future():
    m = RFWaveNet(WaveNetConfig(residual_channels=8, num_blocks=2, dilation_cycle=[1, 2], causal=False))
    x = rand_mix(2, L=32)
    y0 = m.predict(x)
    x[..., 20:] += 1.0
    assert not np.array_equal(y0[..., 17:20], m.predict(x)[..., 17:20])


# -- baselines ---------------------------------------------------------------


def _fm_stream(seconds=0.5, seed=0):
    return fm_modulate(speech_like_audio(seconds, seed=seed))


def test_matched_filter_clean_equals_plain_demod():
    x = _fm_stream()
    band = FrequencyBand(-15_000.0, 15_000.0)
    a = matched_filter_baseline(x, band).samples
    b = fm_demodulate(x).samples
    assert np.corrcoef(a[200:-200], b[200:-200])[0, 1] >= 0.99
    assert np.array_equal(a, matched_filter_baseline(x, band).samples)


def test_matched_filter_degrades_with_interference():
    from rfreject.toy import ToyTask

    task = ToyTask()
    audio, lo = task.held_out_mixture(-10.0, FrequencyBand(-12_000.0, 12_000.0), seconds=1.0)
    _, hi = task.held_out_mixture(20.0, FrequencyBand(-12_000.0, 12_000.0), seconds=1.0)
    band = FrequencyBand(-12_000.0, 12_000.0)
    c_lo = np.corrcoef(audio.samples, matched_filter_baseline(lo.mixture, band).samples)[0, 1]
    c_hi = np.corrcoef(audio.samples, matched_filter_baseline(hi.mixture, band).samples)[0, 1]
    assert c_lo < c_hi


def test_bandpass_projection_keeps_in_band():
    fs = 50_000.0
    n = np.arange(1000)
    x = np.exp(2j * np.pi * 1000 * n / fs) + np.exp(2j * np.pi * 20_000 * n / fs)
    y = bandpass_projection(x, FrequencyBand(-5000.0, 5000.0), fs)
    assert np.allclose(y, np.exp(2j * np.pi * 1000 * n / fs), atol=1e-12)
    z = bandpass(IqSignal(x, fs), FrequencyBand(-5000.0, 5000.0)).samples
    assert np.max(np.abs(z[200:-200] - y[200:-200])) < 0.02


def test_lmmse_interference_free_limit():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((16, 32)) + 1j * rng.standard_normal((16, 32))
    C_s = G @ G.conj().T / 32
    y = IqSignal(rng.standard_normal(64) + 1j * rng.standard_normal(64), 1.0)
    out = lmmse_baseline(y, C_s, np.zeros((16, 16)), loading=0.0)
    assert np.max(np.abs(out.samples - y.samples)) <= 1e-6


@pytest.mark.parametrize("p,q", [(1.0, 1.0), (2.0, 0.5), (0.3, 3.0)])
def test_lmmse_scalar_shrinkage(p, q):
    M = 32
    W = lmmse_filter(p * np.eye(M), q * np.eye(M), loading=0.0)
    y = np.random.default_rng(1).standard_normal(M * 4) + 0j
    out = lmmse_baseline(IqSignal(y, 1.0), p * np.eye(M), q * np.eye(M), loading=0.0).samples
    assert np.max(np.abs(out - y * p / (p + q))) <= 1e-6
    assert np.allclose(W, np.eye(M) * p / (p + q), atol=1e-12)


def _correlated_instance(M, n_train, n_test, seed):
    """Narrowband s, strongly correlated AR(1) b; covariances known in closed form."""
    rng = np.random.default_rng(seed)
    idx = np.arange(M)
    lag = idx[:, None] - idx[None, :]
    C_s = np.sinc(0.2 * lag) * np.exp(2j * np.pi * 0.05 * lag) * 0.2  # flat band [0.0, 0.2]
    C_s = C_s / np.real(np.trace(C_s)) * M
    rho = 0.95 * np.exp(1j * 0.3)
    C_b = np.where(lag >= 0, rho ** np.abs(lag), np.conj(rho) ** np.abs(lag))
    def draw(C, n):
        L = np.linalg.cholesky(C + 1e-9 * np.eye(M))
        z = (rng.standard_normal((n, M)) + 1j * rng.standard_normal((n, M))) / math.sqrt(2)
        return z @ L.T
    return C_s, C_b, draw(C_s, n_test), draw(C_b, n_test)


def test_lmmse_beats_bandpass_projection():
    M = 64
    C_s, C_b, s, b = _correlated_instance(M, 0, 200, 0)
    y = s + b
    W = lmmse_filter(C_s, C_b)
    mse_lmmse = np.mean(np.abs(y @ W.T - s) ** 2)
    proj = bandpass_projection(y, FrequencyBand(0.0, 0.2 + 1e-9), 1.0)
    mse_proj = np.mean(np.abs(proj - s) ** 2)
    assert mse_lmmse <= mse_proj
    assert mse_lmmse < np.mean(np.abs(y - s) ** 2)


def test_sample_covariance_recovers_white_power():
    rng = np.random.default_rng(2)
    z = [IqSignal(2 * (rng.standard_normal(4096) + 1j * rng.standard_normal(4096)) / math.sqrt(2), 1.0) for _ in range(4)]
    C = sample_covariance(z, 8)
    assert np.allclose(np.diag(C).real, 4.0, rtol=0.1)
    with pytest.raises(ValueError):
        sample_covariance([IqSignal(np.ones(4, complex), 1.0)], 8)


def test_lmmse_singular_is_reported():
    with pytest.raises(LmmseError, match="condition"):
        lmmse_filter(np.zeros((4, 4)), np.zeros((4, 4)), loading=0.0)


def test_lmmse_separator_matches_function():
    rng = np.random.default_rng(3)
    C_s, C_b, *_ = _correlated_instance(16, 0, 1, 3)
    x = rand_mix(8, B=2, L=40)
    out = LmmseSeparator(C_s, C_b).predict(x)
    ref = lmmse_baseline(IqSignal(x[0, 0] + 1j * x[0, 1], 1.0), C_s, C_b).samples
    assert np.allclose(out[0, 0] + 1j * out[0, 1], ref, atol=1e-5)
    assert np.array_equal(Passthrough().predict(x), x)


def test_lmmse_solve_time_positive():
    assert time_lmmse_solve(16, repeats=2) > 0


# -- training ----------------------------------------------------------------


def _tiny_dataset(count=24, L=64):
    rng = np.random.default_rng(0)
    n = np.arange(L)
    soi = [IqSignal(np.exp(2j * np.pi * (0.02 + 0.01 * k) * n), 1.0) for k in range(3)]
    interf = [IqSignal((rng.standard_normal(L) + 1j * rng.standard_normal(L)) / math.sqrt(2), 1.0) for _ in range(4)]
    spec = DatasetSpec(slice_length=L, sinr_range_db=(0.0, 0.0), count=count, seed=1, split=(0.75, 0.25))
    return build_dataset(soi, interf, spec, FrequencyBand(-0.5, 0.5))


def test_train_is_deterministic_and_checkpoints(tmp_path):
    tr, va = _tiny_dataset()
    runs = []
    for i in range(2):
        m = RFDecoder(TINY)
        res = train(m, tr, va, epochs=3, lr=3e-3, batch_size=6, log_path=tmp_path / f"log{i}.csv", checkpoint=tmp_path / f"m{i}", checkpoint_meta={"tag": i})
        runs.append(res)
    a, b = runs
    assert [r.val_mse for r in a.history] == [r.val_mse for r in b.history]
    best = np.minimum.accumulate([r.val_mse for r in a.history])
    assert np.all(np.isfinite(best)) and np.all(np.diff(best) <= 0)
    header = (tmp_path / "log0.csv").read_text().splitlines()[0]
    assert header == "epoch,train_mse,val_mse,wall_time"
    model, meta = load_model(tmp_path / "m0")
    assert meta["tag"] == 0 and meta["model"]["kind"] == "decoder"
    assert isinstance(model, RFDecoder)


def test_passthrough_mse_closed_form():
    tr, _ = _tiny_dataset()
    direct = np.mean([np.mean((np.stack([e.mixture.samples.real, e.mixture.samples.imag]) - np.stack([e.soi.samples.real, e.soi.samples.imag])) ** 2) for e in tr])
    assert passthrough_mse(tr) == pytest.approx(direct, rel=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_nan():
    tr, va = _tiny_dataset()
    m = RFDecoder(TINY)
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train(m, tr, va, epochs=2, lr=1e30, batch_size=6)


def test_build_model_round_trip():
    for m in (RFDecoder(TINY), RFWaveNet(WaveNetConfig(residual_channels=4, num_blocks=2, dilation_cycle=[1, 2]))):
        clone = build_model(m.config_dict())
        assert clone.num_parameters() == m.num_parameters()
    with pytest.raises(ValueError):
        build_model({"kind": "rnn"})
