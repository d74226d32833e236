"""Training loop shared by the spherical CNN and the MLP baseline.

Both models are trained against the spatial loss: outputs and targets are SH
coefficient vectors compared after projection onto a spherical grid.  The
loop keeps the best-validation parameters and restores them at the end.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import make_model_grid, spatial_mse_loss
from .optim import AdamW, StepLR, clip_grad_norm


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_loss: float


def evaluate_loss(model, inputs, targets, grid, batch_size: int = 1024) -> float:
    """Mean spatial loss over a dataset in eval mode (no recording)."""
    total = 0.0
    n = inputs.shape[0]
    for start in range(0, n, batch_size):
        xb = inputs[start : start + batch_size]
        yb = targets[start : start + batch_size]
        pred = model.forward(xb, training=False)
        loss = spatial_mse_loss(pred, ad.tensor(yb), grid)
        total += loss.item() * xb.shape[0]
    return total / n


def predict(model, inputs, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode forward pass over a dataset, returned as one array."""
    outs = []
    for start in range(0, inputs.shape[0], batch_size):
        outs.append(model.forward(inputs[start : start + batch_size],
                                  training=False).data)
    return np.concatenate(outs, axis=0)


def train_model(model, train_inputs, train_targets, val_inputs, val_targets, *,
                epochs: int = 80, batch_size: int = 128, base_lr: float = 1e-4,
                weight_decay: float = 1e-4, clip_norm: float = 10.0,
                lr_step_epochs: int = 17, lr_factor: float = 0.5, seed: int = 0,
                loss_grid=None, log_path=None, progress=None) -> TrainResult:
    """Train a model with AdamW, step-decayed learning rate, and gradient
    clipping, checkpointing the best-validation parameters.

    The batch order is drawn from a generator seeded only by ``seed``, so a
    given (model init, data, seed) triple reproduces bit-identical training.
    Batches that would reach batch normalization with a single row are
    dropped for that epoch.  Raises TrainingDiverged on non-finite loss.
    """
    if loss_grid is None:
        loss_grid = getattr(model, "grid", None)
        if loss_grid is None:
            loss_grid = make_model_grid("fibonacci-antipodal", 290)
    params = model.parameters()
    opt = AdamW(params, lr=base_lr, weight_decay=weight_decay)
    sched = StepLR(base_lr, lr_step_epochs, lr_factor)
    rng = np.random.default_rng([seed, 0x0B417])
    n = train_inputs.shape[0]
    if n < 2:
        raise ValueError("need at least two training samples")

    history = []
    best_val = np.inf
    best_epoch = -1
    best_state = None
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "seconds"])

    try:
        for epoch in range(epochs):
            t_start = time.perf_counter()
            opt.lr = sched.lr_at(epoch)
            perm = rng.permutation(n)
            total = 0.0
            seen = 0
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                if idx.size < 2:
                    continue
                xb = train_inputs[idx]
                yb = train_targets[idx]
                opt.zero_grad()
                with ad.Tape() as tape:
                    pred = model.forward(xb, training=True)
                    loss = spatial_mse_loss(pred, ad.tensor(yb), loss_grid)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite training loss at epoch {epoch}")
                tape.backward(loss)
                clip_grad_norm(params, clip_norm)
                opt.step()
                total += value * idx.size
                seen += idx.size
            train_loss = total / max(seen, 1)
            val_loss = evaluate_loss(model, val_inputs, val_targets, loss_grid)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            seconds = time.perf_counter() - t_start
            stats = EpochStats(epoch, opt.lr, train_loss, val_loss, seconds)
            history.append(stats)
            if writer is not None:
                writer.writerow([epoch, f"{opt.lr:.8e}", f"{train_loss:.10e}",
                                 f"{val_loss:.10e}", f"{seconds:.3f}"])
                log_file.flush()
            if progress is not None:
                progress(stats)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = model.state()
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(history=history, best_epoch=best_epoch, best_val_loss=best_val)
