"""Parameter containers and the flat-binary checkpoint format.

Checkpoint layout: ``<stem>.bin`` holds every tensor's float32 little-endian
data back to back; ``<stem>.json`` indexes it as
``{"tensors": [{"name", "shape", "offset", "count"}], "meta": {...}}`` where
``offset`` and ``count`` are in float32 elements.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .tensor import Tensor, layer_norm, linear, parameter


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        mismatched = [
            f"{k}: checkpoint {tuple(state[k].shape)} vs model {own[k].shape}"
            for k in own
            if k in state and tuple(state[k].shape) != own[k].shape
        ]
        if missing or unexpected or mismatched:
            parts = []
            if missing:
                parts.append(f"missing {missing}")
            if unexpected:
                parts.append(f"unexpected {unexpected}")
            if mismatched:
                parts.append("shape mismatch: " + "; ".join(mismatched))
            raise ValueError("checkpoint does not match model: " + ", ".join(parts))
        for k, p in own.items():
            p.data[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out, (n_in, n_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(n))
        self.beta = parameter(np.zeros(n))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def save_checkpoint(stem: Union[str, Path], tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            fh.write(arr.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.size
    stem.with_suffix(".json").write_text(json.dumps({"tensors": index, "meta": meta or {}}, indent=2, sort_keys=True))


def load_checkpoint(stem: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    stem = Path(stem)
    index = json.loads(stem.with_suffix(".json").read_text())
    flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    out = {}
    for rec in index["tensors"]:
        chunk = flat[rec["offset"] : rec["offset"] + rec["count"]]
        out[rec["name"]] = chunk.reshape(rec["shape"]).astype(np.float32)
    return out, index.get("meta", {})
