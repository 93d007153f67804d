"""Separators: RF WaveNet, the autoregressive RF decoder, and classical baselines."""
from __future__ import annotations

from pathlib import Path
from typing import Union

from ..autograd import load_checkpoint
from .baselines import (
    LmmseError,
    LmmseSeparator,
    Passthrough,
    bandpass,
    bandpass_projection,
    lmmse_baseline,
    lmmse_filter,
    matched_filter_baseline,
    sample_covariance,
    time_lmmse_solve,
)
from .decoder import DecoderConfig, RFDecoder, StreamState
from .wavenet import RFWaveNet, WaveNetConfig

MODEL_KINDS = ("decoder", "wavenet")


def build_model(config: dict):
    """Instantiate a neural separator from its ``config_dict()`` form."""
    cfg = dict(config)
    kind = cfg.pop("kind", None)
    if kind == "decoder":
        return RFDecoder(DecoderConfig(**cfg))
    if kind == "wavenet":
        return RFWaveNet(WaveNetConfig(**cfg))
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def load_model(stem: Union[str, Path]):
    """Rebuild a model from a checkpoint written by the trainer.

    Returns ``(model, meta)``; a tensor/shape mismatch raises with the diff list.
    """
    tensors, meta = load_checkpoint(stem)
    if "model" not in meta:
        raise ValueError(f"checkpoint {stem} has no model config in its metadata")
    model = build_model(meta["model"])
    model.load_state_dict(tensors)
    return model, meta
