"""MSE training loop shared by the neural separators."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autograd import Adam, Tensor, clip_grad_norm, mse_loss, no_grad, save_checkpoint
from ..mixing import MixtureExample, apply_augmentation, draw_augmentation

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    wall_time: float


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_val: float = float("inf")
    best_epoch: int = -1

    @property
    def loss_curve(self) -> List[Tuple[int, float, float]]:
        return [(r.epoch, r.train_mse, r.val_mse) for r in self.history]


def stack_examples(examples: Sequence[MixtureExample]) -> Tuple[np.ndarray, np.ndarray]:
    """Mixtures and SOIs as complex ``(N, L)`` arrays."""
    mix = np.stack([ex.mixture.samples for ex in examples])
    soi = np.stack([ex.soi.samples for ex in examples])
    return mix, soi


def to_channels(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=1).astype(np.float32)


def model_loss(model, mix: np.ndarray, soi: np.ndarray) -> Tensor:
    """MSE of the model's training-mode output against the true SOI channels."""
    if getattr(model, "kind", "") == "decoder":
        pred = model.forward(mix, soi)
    else:
        pred = model.forward(mix)
    return mse_loss(pred, Tensor(soi))


def evaluate_mse(model, mix: np.ndarray, soi: np.ndarray, batch_size: int = 64, free_running: bool = False) -> float:
    """Mean squared error over float channel arrays ``(N, 2, L)``.

    ``free_running`` uses the model's inference path (self-feedback for the
    decoder) instead of the teacher-forced training path.
    """
    total = 0.0
    with no_grad():
        for i in range(0, len(mix), batch_size):
            m, s = mix[i : i + batch_size], soi[i : i + batch_size]
            if free_running:
                pred = model.predict(m)
            else:
                pred = model_loss(model, m, s)
                total += float(pred.data) * len(m)
                continue
            total += float(np.mean((pred.astype(np.float64) - s) ** 2)) * len(m)
    return total / len(mix)


def passthrough_mse(examples: Sequence[MixtureExample]) -> float:
    """Closed form: mixture - soi is the scaled interference, so the per-channel MSE is
    ``mean |kappa b|^2 / 2``."""
    return float(np.mean([np.mean(np.abs(ex.interference_scaled.samples) ** 2) / 2 for ex in examples]))


def train(
    model,
    train_set: Sequence[MixtureExample],
    val_set: Sequence[MixtureExample],
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
    max_shift: Optional[int] = None,
    clip_norm: float = 1.0,
    lr_decay: float = 1.0,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint: Optional[Union[str, Path]] = None,
    augment: bool = True,
    checkpoint_meta: Optional[dict] = None,
) -> TrainResult:
    """Adam on MSE with per-example joint time-shift/phase augmentation.

    The parameters with the best validation MSE are restored on return (and
    written to ``checkpoint`` when given). ``lr_decay`` multiplies the rate
    after every epoch.
    """
    rng = np.random.default_rng(seed)
    mix_c, soi_c = stack_examples(train_set)
    val_mix, val_soi = (to_channels(a) for a in stack_examples(val_set))
    n = len(mix_c)
    L = mix_c.shape[1]
    if max_shift is None:
        max_shift = L - 1
    params = model.parameters()
    opt = Adam(params, lr=lr)
    result = TrainResult()
    best_state = model.state_dict()
    t0 = time.monotonic()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_mse", "wall_time"])
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            running = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                m = mix_c[idx]
                s = soi_c[idx]
                if augment:
                    m = m.copy()
                    s = s.copy()
                    for j in range(len(idx)):
                        shift, theta = draw_augmentation(max_shift, rng)
                        m[j] = apply_augmentation(m[j], shift, theta)
                        s[j] = apply_augmentation(s[j], shift, theta)
                objective = model_loss(model, to_channels(m), to_channels(s))
                value = float(objective.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch starting {start} (lr={opt.lr:g}); "
                        "try a lower learning rate or tighter gradient clipping"
                    )
                opt.zero_grad()
                objective.backward()
                clip_grad_norm(params, clip_norm)
                opt.step()
                running += value * len(idx)
            train_mse = running / n
            val_mse = evaluate_mse(model, val_mix, val_soi)
            if not math.isfinite(val_mse):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            rec = EpochRecord(epoch, train_mse, val_mse, time.monotonic() - t0)
            result.history.append(rec)
            log.info("epoch %d train_mse %.5f val_mse %.5f", epoch, train_mse, val_mse)
            if writer is not None:
                writer.writerow([epoch, repr(train_mse), repr(val_mse), f"{rec.wall_time:.3f}"])
                fh.flush()
            if val_mse < result.best_val:
                result.best_val = val_mse
                result.best_epoch = epoch
                best_state = model.state_dict()
            opt.lr *= lr_decay
    finally:
        if fh is not None:
            fh.close()
    model.load_state_dict(best_state)
    if checkpoint is not None:
        meta = {"model": model.config_dict(), "best_val": result.best_val, "best_epoch": result.best_epoch}
        meta.update(checkpoint_meta or {})
        save_checkpoint(checkpoint, best_state, meta)
    return result
