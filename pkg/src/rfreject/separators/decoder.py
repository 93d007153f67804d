"""Autoregressive transformer decoder separator with KV-cache streaming.

The mixture is cut into windows of ``W`` samples. Token ``t`` is the
flattened mixture window ``t`` concatenated with the SOI window ``t - 1``
(zeros for the first token), projected to ``hidden_dim``. Pre-norm blocks
apply banded causal self-attention (each token sees itself and at most
``K - 1`` predecessors) with rotary positions, then a GELU MLP. The head maps
back to ``2W`` SOI values.

During training the previous SOI window is the ground truth (teacher
forcing). At inference :meth:`RFDecoder.stream_step` feeds back its own
previous output and keeps per-layer key/value caches of the last ``K``
tokens, so a stream of any length costs O(K) per step.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from ..autograd import (
    LayerNorm,
    Linear,
    Module,
    Tensor,
    concat,
    gelu,
    matmul,
    no_grad,
    rotary,
    softmax,
)


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 4
    hidden_dim: int = 96
    num_heads: int = 4
    window: int = 64
    context: int = 32
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    linear_skip: bool = False
    input_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if (self.hidden_dim // self.num_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.window < 1 or self.context < 1 or self.num_layers < 1:
            raise ValueError("window, context and num_layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @classmethod
    def full_scale(cls) -> "DecoderConfig":
        """14 layers, width 480, 12 heads, 80-sample windows, 20-token context."""
        return cls(num_layers=14, hidden_dim=480, num_heads=12, window=80, context=20)

    def to_dict(self) -> dict:
        return {"kind": "decoder", **asdict(self)}


def band_mask(n_tokens: int, context: int, dtype=np.float32) -> np.ndarray:
    """Additive attention mask: 0 where ``t - K < s <= t``, ``-inf`` elsewhere."""
    t = np.arange(n_tokens)[:, None]
    s = np.arange(n_tokens)[None, :]
    allowed = (s <= t) & (s > t - context)
    return np.where(allowed, 0.0, -np.inf).astype(dtype)


@dataclass
class StreamState:
    keys: List[Optional[np.ndarray]] = field(default_factory=list)
    values: List[Optional[np.ndarray]] = field(default_factory=list)
    last_output: Optional[np.ndarray] = None
    position: int = 0

    @property
    def cache_length(self) -> int:
        return 0 if not self.keys or self.keys[0] is None else self.keys[0].shape[2]


class _Block(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        self.cfg = cfg
        self.ln1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, rng)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, rng)

    def _heads(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.cfg.num_heads, self.cfg.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        B, H, T, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)

    def attend(self, h: Tensor, positions: np.ndarray, mask: Optional[np.ndarray], cache=None):
        """Self-attention on ``h`` (B, T, D). With ``cache=(k_prev, v_prev)`` the
        new keys/values are appended to the cached ones before attending."""
        q = rotary(self._heads(self.q(h)), positions, self.cfg.rope_base)
        k = rotary(self._heads(self.k(h)), positions, self.cfg.rope_base)
        v = self._heads(self.v(h))
        if cache is not None and cache[0] is not None:
            K = self.cfg.context
            k = concat([Tensor(cache[0]), k], axis=2)[:, :, -K:]
            v = concat([Tensor(cache[1]), v], axis=2)[:, :, -K:]
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.cfg.head_dim))
        if mask is not None:
            scores = scores + mask
        att = softmax(scores, axis=-1)
        return self.o(self._merge(matmul(att, v))), k, v

    def __call__(self, x: Tensor, positions: np.ndarray, mask: Optional[np.ndarray], cache=None):
        a, k, v = self.attend(self.ln1(x), positions, mask, cache)
        x = x + a
        x = x + self.fc2(gelu(self.fc1(self.ln2(x))))
        return x, k, v


class RFDecoder(Module):
    kind = "decoder"

    def __init__(self, cfg: DecoderConfig = DecoderConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w2 = 2 * cfg.window
        n_in = 2 * w2 + (1 if cfg.input_norm else 0)
        self.embed = Linear(n_in, cfg.hidden_dim, rng)
        self.blocks = [_Block(cfg, rng) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(cfg.hidden_dim)
        self.head = Linear(cfg.hidden_dim, w2, rng)
        # optional token-level linear path (a learned causal FIR plus AR feedback),
        # zero-initialised so training starts from the plain decoder
        self.skip = Linear(n_in, w2, rng, zero=True) if cfg.linear_skip else None

    # -- layout helpers ---------------------------------------------------
    def to_tokens(self, x: np.ndarray) -> np.ndarray:
        """``(B, 2, L)`` -> ``(B, L/W, 2W)`` with I/Q interleaved per sample."""
        B, _, L = x.shape
        W = self.cfg.window
        if L % W:
            raise ValueError(f"sequence length {L} is not divisible by window {W}")
        return np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(B, L // W, 2 * W)

    def from_tokens(self, t: np.ndarray) -> np.ndarray:
        B, T, _ = t.shape
        return t.reshape(B, T * self.cfg.window, 2).transpose(0, 2, 1)

    def _tokens_to_signal(self, y: Tensor) -> Tensor:
        B, T, _ = y.shape
        return y.reshape(B, T * self.cfg.window, 2).transpose(0, 2, 1)

    # -- batch (teacher-forced) path ---------------------------------------
    def forward(self, mixture, soi) -> Tensor:
        """Teacher-forced pass: token ``t`` conditions on ground-truth SOI window ``t-1``."""
        mix = np.asarray(mixture.data if isinstance(mixture, Tensor) else mixture, dtype=np.float32)
        ref = np.asarray(soi.data if isinstance(soi, Tensor) else soi, dtype=np.float32)
        if mix.shape != ref.shape or mix.ndim != 3 or mix.shape[1] != 2:
            raise ValueError(f"mixture {mix.shape} and soi {ref.shape} must both be (batch, 2, L)")
        mt = self.to_tokens(mix)
        st = self.to_tokens(ref)
        prev = np.concatenate([np.zeros_like(st[:, :1]), st[:, :-1]], axis=1)
        return self._tokens_to_signal(self.run_tokens(self._assemble(mt, prev)))

    def _assemble(self, mt: np.ndarray, prev: np.ndarray) -> np.ndarray:
        """Token features: mixture window (RMS-normalized plus its log-RMS when
        ``input_norm``) followed by the previous SOI window."""
        if not self.cfg.input_norm:
            return np.concatenate([mt, prev], axis=-1)
        rms = np.sqrt(np.mean(mt * mt, axis=-1, keepdims=True) + 1e-12)
        return np.concatenate([mt / rms, np.log(rms), prev], axis=-1).astype(np.float32)

    __call__ = forward

    def run_tokens(self, tokens: np.ndarray) -> Tensor:
        T = tokens.shape[1]
        positions = np.arange(T)
        mask = band_mask(T, self.cfg.context)
        tok = Tensor(tokens)
        h = self.embed(tok)
        for blk in self.blocks:
            h, _, _ = blk(h, positions, mask)
        return self._readout(h, tok)

    def _readout(self, h: Tensor, tok: Tensor) -> Tensor:
        y = self.head(self.ln_f(h))
        return y + self.skip(tok) if self.skip is not None else y

    # -- streaming path ----------------------------------------------------
    def stream_reset(self, batch: int = 1) -> StreamState:
        n = self.cfg.num_layers
        return StreamState(
            keys=[None] * n,
            values=[None] * n,
            last_output=np.zeros((batch, 2 * self.cfg.window), dtype=np.float32),
            position=0,
        )

    def stream_step(self, state: StreamState, mixture_window: np.ndarray, feedback: Optional[np.ndarray] = None):
        """Advance one token. ``mixture_window`` is ``(2, W)`` or ``(B, 2, W)``.

        ``feedback`` replaces the model's own previous output window (used to
        inject ground truth when checking cache equivalence). Returns the SOI
        window in the same layout as the input and the updated state.
        """
        W = self.cfg.window
        x = np.asarray(mixture_window, dtype=np.float32)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != (2, W):
            raise ValueError(f"mixture window must be (2, {W}) per stream, got {x.shape[1:]}")
        if state.last_output is None or state.last_output.shape[0] != x.shape[0]:
            raise ValueError("stream state batch does not match input; call stream_reset(batch)")
        mt = self.to_tokens(x)[:, 0]
        if feedback is not None:
            fb = np.asarray(feedback, dtype=np.float32)
            prev = self.to_tokens(fb[None] if fb.ndim == 2 else fb)[:, 0]
        else:
            prev = state.last_output
        tok = self._assemble(mt, prev)[:, None, :]
        pos = np.array([state.position])
        with no_grad():
            tt = Tensor(tok)
            h = self.embed(tt)
            for i, blk in enumerate(self.blocks):
                h, k, v = blk(h, pos, None, (state.keys[i], state.values[i]))
                state.keys[i] = k.data
                state.values[i] = v.data
            y = self._readout(h, tt).data[:, 0]
        state.last_output = y
        state.position += 1
        out = self.from_tokens(y[:, None, :])
        return (out[0] if single else out), state

    def generate(self, mixture: np.ndarray) -> np.ndarray:
        """Free-running inference over ``(B, 2, L)``: each window feeds back the previous
        estimate."""
        mix = np.asarray(mixture, dtype=np.float32)
        B, _, L = mix.shape
        W = self.cfg.window
        if L % W:
            raise ValueError(f"sequence length {L} is not divisible by window {W}")
        state = self.stream_reset(B)
        out = np.empty_like(mix)
        for t in range(L // W):
            out[:, :, t * W : (t + 1) * W], state = self.stream_step(state, mix[:, :, t * W : (t + 1) * W])
        return out

    predict = generate

    def config_dict(self) -> dict:
        return self.cfg.to_dict()
