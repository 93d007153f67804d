"""WaveNet-style separator over stacked I/Q channels.

Input and output are ``(batch, 2, L)``; internally activations run
``(batch, L, channels)``. Each residual layer applies a dilated conv to
``2C`` channels, a tanh/sigmoid gate, then 1x1 residual and skip convs. The
head is ``relu -> 1x1 (C->C) -> relu -> 1x1 (C->2)`` over the summed skips.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from ..autograd import Module, Tensor, conv1d, no_grad, parameter, relu, sigmoid, tanh
from ..autograd.module import glorot


def _doubling(n: int) -> Tuple[int, ...]:
    return tuple(2**i for i in range(n))


@dataclass(frozen=True)
class WaveNetConfig:
    residual_channels: int = 32
    num_blocks: int = 10
    kernel_size: int = 2
    dilation_cycle: Tuple[int, ...] = field(default_factory=lambda: _doubling(10))
    causal: bool = True
    zero_init_head: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilation_cycle", tuple(int(d) for d in self.dilation_cycle))
        if self.kernel_size < 1 or self.num_blocks < 1 or self.residual_channels < 1:
            raise ValueError("kernel_size, num_blocks and residual_channels must be >= 1")
        if not self.dilation_cycle or min(self.dilation_cycle) < 1:
            raise ValueError("dilation_cycle must be a non-empty list of positive integers")

    @property
    def dilations(self) -> List[int]:
        cyc = self.dilation_cycle
        return [cyc[i % len(cyc)] for i in range(self.num_blocks)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    @classmethod
    def full_scale(cls) -> "WaveNetConfig":
        """30 layers of 128 channels, kernel 3, three cycles of dilations 1..512."""
        return cls(residual_channels=128, num_blocks=30, kernel_size=3, dilation_cycle=_doubling(10))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_cycle"] = list(self.dilation_cycle)
        return {"kind": "wavenet", **d}


class _Conv(Module):
    def __init__(self, k: int, cin: int, cout: int, rng: np.random.Generator, zero: bool = False):
        shape = (k, cin, cout)
        self.weight = parameter(np.zeros(shape) if zero else glorot(rng, k * cin, cout, shape))
        self.bias = parameter(np.zeros(cout))


class _ResidualLayer(Module):
    def __init__(self, cfg: WaveNetConfig, dilation: int, rng: np.random.Generator):
        c = cfg.residual_channels
        self.dilation = dilation
        self.causal = cfg.causal
        self.dilated = _Conv(cfg.kernel_size, c, 2 * c, rng)
        self.res = _Conv(1, c, c, rng)
        self.skip = _Conv(1, c, c, rng)

    def __call__(self, x: Tensor):
        c = x.shape[-1]
        h = conv1d(x, self.dilated.weight, self.dilated.bias, self.dilation, self.causal)
        z = tanh(h[..., :c]) * sigmoid(h[..., c:])
        res = conv1d(z, self.res.weight, self.res.bias)
        skip = conv1d(z, self.skip.weight, self.skip.bias)
        return x + res, skip


class RFWaveNet(Module):
    kind = "wavenet"

    def __init__(self, cfg: WaveNetConfig = WaveNetConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.residual_channels
        self.inp = _Conv(1, 2, c, rng)
        self.layers = [_ResidualLayer(cfg, d, rng) for d in cfg.dilations]
        self.head1 = _Conv(1, c, c, rng)
        self.head2 = _Conv(1, c, 2, rng, zero=cfg.zero_init_head)

    def forward(self, mixture) -> Tensor:
        x = mixture if isinstance(mixture, Tensor) else Tensor(mixture)
        if x.ndim != 3 or x.shape[1] != 2:
            raise ValueError(f"expected (batch, 2, L) input, got {x.shape}")
        if x.shape[2] < self.cfg.receptive_field:
            warnings.warn(
                f"input length {x.shape[2]} is shorter than the receptive field "
                f"{self.cfg.receptive_field}; early outputs see zero padding",
                stacklevel=2,
            )
        h = conv1d(x.transpose(0, 2, 1), self.inp.weight, self.inp.bias)
        skips = None
        for layer in self.layers:
            h, s = layer(h)
            skips = s if skips is None else skips + s
        y = conv1d(relu(skips), self.head1.weight, self.head1.bias)
        y = conv1d(relu(y), self.head2.weight, self.head2.bias)
        return y.transpose(0, 2, 1)

    __call__ = forward

    def predict(self, mixture: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(np.asarray(mixture)).data

    def config_dict(self) -> dict:
        return self.cfg.to_dict()
