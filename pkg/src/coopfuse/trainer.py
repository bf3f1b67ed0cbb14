"""Training loop: Adam + multi-step LR schedule + early stopping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .nn import Adam, save_checkpoint
from .pipeline import CoopModel, FrameBundle, frame_loss, frame_targets, select_cavs
from .tensor import NonFiniteError


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def _epoch_cav_subsets(frames, n_max: int, rng: np.random.Generator) -> list[list[int]]:
    """Random CAV group per frame, ego always included."""
    subsets = []
    for frame in frames:
        others = list(range(1, len(frame.poses)))
        k = int(rng.integers(0, min(len(others), n_max - 1) + 1))
        chosen = sorted(rng.choice(others, size=k, replace=False).tolist()) if k else []
        subsets.append([0] + chosen)
    return subsets


def train(
    model: CoopModel,
    train_frames: list[FrameBundle],
    val_frames: list[FrameBundle],
    checkpoint_path: str | None = None,
) -> TrainLog:
    """Train in place; returns the loss log. Best-val parameters win.

    Each epoch takes one Adam step per training frame on the single-frame
    loss. Intermediate fusion trains on a fresh random CAV subset per
    frame (ego fixed) when ``vary_cav_count`` is set, otherwise on the
    same nearest-first group used at evaluation. The LR is
    multiplied by ``lr_decay`` at each milestone epoch; training stops
    when the validation loss has not improved for ``patience`` epochs.
    """
    cfg = model.config.train
    if not train_frames:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    intermediate = model.config.fusion_mode not in ("none", "early", "late")
    vary = intermediate and cfg.vary_cav_count

    targets = [frame_targets(model, f) for f in train_frames]
    val_targets = [frame_targets(model, f) for f in val_frames]

    opt = Adam(
        model.trainable_parameters(),
        lr=cfg.lr,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    log = TrainLog()
    best_val = np.inf
    best_state: dict[str, np.ndarray] | None = None
    since_best = 0

    fixed_subsets = [select_cavs(f, model.config.n_max) for f in train_frames] if intermediate and not vary else None

    freeze_epoch = int(np.ceil(cfg.bn_freeze_frac * cfg.epochs))
    for epoch in range(cfg.epochs):
        if epoch in cfg.milestones:
            opt.lr *= cfg.lr_decay
        # late epochs train against frozen batchnorm statistics so the
        # weights settle into the normalization used at inference
        model.set_training(epoch < freeze_epoch)
        subsets = _epoch_cav_subsets(train_frames, model.config.n_max, rng) if vary else fixed_subsets
        epoch_loss = 0.0
        for i, frame in enumerate(train_frames):
            opt.zero_grad()
            try:
                loss = frame_loss(model, frame, targets[i], subsets[i] if subsets else None)
            except NonFiniteError as err:
                raise DivergenceError(f"non-finite loss at epoch {epoch}, frame {frame.frame_id}") from err
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss diverged at epoch {epoch}, frame {frame.frame_id}")
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
        log.train_loss.append(epoch_loss / len(train_frames))
        log.lr.append(opt.lr)

        val = evaluate_loss(model, val_frames, val_targets) if val_frames else log.train_loss[-1]
        log.val_loss.append(val)
        if val < best_val - 1e-12:
            best_val = val
            log.best_epoch = epoch
            best_state = {p.name: p.data.copy() for p in model.parameters()}
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                log.stopped_early = True
                break

    if best_state is not None:
        for p in model.parameters():
            p.data = best_state[p.name]
    model.set_training(False)
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            model.parameters(),
            extra={"config": model.config.to_json(), "best_epoch": log.best_epoch},
        )
    return log


def evaluate_loss(model: CoopModel, frames: list[FrameBundle], targets=None) -> float:
    """Mean loss over frames with fixed CAV subsets (no randomness)."""
    if targets is None:
        targets = [frame_targets(model, f) for f in frames]
    model.set_training(False)
    intermediate = model.config.fusion_mode not in ("none", "early", "late")
    total = 0.0
    with tensor.no_grad():
        for frame, tgt in zip(frames, targets):
            subset = select_cavs(frame, model.config.n_max) if intermediate else None
            total += frame_loss(model, frame, tgt, subset).item()
    return total / len(frames)
