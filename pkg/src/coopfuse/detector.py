"""Anchor-based single-shot detection head, target assignment and loss.

One single-class head per object class (vehicle, pedestrian), each with
B=2 rotated anchors (0 and pi/2) per output cell, predicting per-anchor
objectness logits and 7 regression offsets (x, y, z, w, l, h, theta).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .geometry import Box7, wrap_angle
from .metrics import Detection, iou_bev, nms
from .nn import Conv2d, Module
from .pillars import GridSpec
from .tensor import Tensor

ANCHOR_ROTATIONS = (0.0, np.pi / 2)
NUM_ROTATIONS = len(ANCHOR_ROTATIONS)


@dataclass(frozen=True)
class ClassAnchor:
    """Per-class anchor prior: (l, w, h) in meters and the box z center."""

    length: float
    width: float
    height: float
    z_center: float

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("anchor priors must be positive")


# priors follow the paper's settings: vehicle (3.9, 1.6, 1.56), pedestrian (0.6, 0.6, 1.7)
DEFAULT_ANCHORS = {
    "vehicle": ClassAnchor(length=3.9, width=1.6, height=1.56, z_center=0.0),
    "pedestrian": ClassAnchor(length=0.6, width=0.6, height=1.7, z_center=0.0),
}


@dataclass(frozen=True)
class MatchThresholds:
    positive: float
    negative: float


DEFAULT_MATCHING = {
    "vehicle": MatchThresholds(positive=0.6, negative=0.45),
    "pedestrian": MatchThresholds(positive=0.5, negative=0.35),
}


@dataclass(frozen=True)
class LossConfig:
    beta_cls: float = 1.0
    beta_reg: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if min(self.beta_cls, self.beta_reg, self.alpha, self.gamma) < 0:
            raise ValueError("loss coefficients must be nonnegative")


def generate_anchors(grid: GridSpec, anchor: ClassAnchor, cls: str) -> list[Box7]:
    """One anchor per (output cell, rotation) at backbone resolution.

    Output cells are 2x the pillar pitch; ordering is (ix, iy, rotation),
    matching the flattened head output layout.
    """
    cell = 2.0 * grid.resolution
    h, w = grid.nx // 2, grid.ny // 2
    anchors = []
    for ix in range(h):
        cx = grid.x_range[0] + (ix + 0.5) * cell
        for iy in range(w):
            cy = grid.y_range[0] + (iy + 0.5) * cell
            for rot in ANCHOR_ROTATIONS:
                anchors.append(
                    Box7(
                        x=cx,
                        y=cy,
                        z=anchor.z_center,
                        w=anchor.width,
                        l=anchor.length,
                        h=anchor.height,
                        theta=rot,
                        cls=cls,
                    )
                )
    return anchors


def encode_box(gt: Box7, anchor: Box7) -> np.ndarray:
    """Offsets (7,) from anchor to ground truth."""
    if min(gt.w, gt.l, gt.h) <= 0:
        raise ValueError("nonpositive ground-truth dims")
    d = np.hypot(anchor.l, anchor.w)
    return np.array(
        [
            (gt.x - anchor.x) / d,
            (gt.y - anchor.y) / d,
            (gt.z - anchor.z) / anchor.h,
            np.log(gt.w / anchor.w),
            np.log(gt.l / anchor.l),
            np.log(gt.h / anchor.h),
            gt.theta - anchor.theta,
        ]
    )


def decode_box(delta: np.ndarray, anchor: Box7) -> Box7:
    """Exact inverse of :func:`encode_box`."""
    d = np.hypot(anchor.l, anchor.w)
    return Box7(
        x=float(anchor.x + delta[0] * d),
        y=float(anchor.y + delta[1] * d),
        z=float(anchor.z + delta[2] * anchor.h),
        w=float(anchor.w * np.exp(delta[3])),
        l=float(anchor.l * np.exp(delta[4])),
        h=float(anchor.h * np.exp(delta[5])),
        theta=wrap_angle(float(anchor.theta + delta[6])),
        cls=anchor.cls,
    )


@dataclass
class AnchorTargets:
    """Assignment for one class: label per anchor and encoded deltas.

    Labels: 1 positive, 0 negative, -1 ignore. ``deltas`` holds the
    encoded offsets to the matched gt for positive anchors (zeros
    elsewhere).
    """

    labels: np.ndarray
    deltas: np.ndarray
    matched_gt: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


def match_anchors(anchors: list[Box7], gts: list[Box7], thresholds: MatchThresholds) -> AnchorTargets:
    """BEV-rotated-IoU assignment with per-gt force matching.

    Anchors at or above the positive threshold are positive, below the
    negative threshold negative, in between ignored. Each gt claims its
    highest-IoU anchor as positive regardless of threshold.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.intp)
    deltas = np.zeros((n, 7))
    if gts:
        iou = np.zeros((n, len(gts)))
        # prefilter by center distance: IoU is zero beyond the corner radii sum
        acenters = np.array([[a.x, a.y] for a in anchors])
        arad = np.array([np.hypot(a.l, a.w) / 2 for a in anchors])
        for j, gt in enumerate(gts):
            grad = np.hypot(gt.l, gt.w) / 2
            near = np.flatnonzero(np.hypot(*(acenters - [gt.x, gt.y]).T) <= arad + grad)
            for i in near:
                iou[i, j] = iou_bev(anchors[i], gt)
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(n), best_gt]
        labels[(best_iou >= thresholds.negative) & (best_iou < thresholds.positive)] = -1
        labels[best_iou >= thresholds.positive] = 1
        matched[labels == 1] = best_gt[labels == 1]
        # force-match: every gt claims its argmax anchor
        for j in range(len(gts)):
            i = int(iou[:, j].argmax())
            labels[i] = 1
            matched[i] = j
        for i in np.flatnonzero(labels == 1):
            deltas[i] = encode_box(gts[matched[i]], anchors[i])
    return AnchorTargets(labels=labels, deltas=deltas, matched_gt=matched)


class ClassHead(Module):
    """Two parallel 1x1 conv branches: objectness logits and box deltas."""

    def __init__(self, rng: np.random.Generator, in_channels: int, prior: float = 0.01):
        self.cls_conv = Conv2d(rng, in_channels, NUM_ROTATIONS, k=1)
        self.reg_conv = Conv2d(rng, in_channels, 7 * NUM_ROTATIONS, k=1)
        # focal-loss-friendly init: start predicting the background prior
        self.cls_conv.bias.data[:] = -np.log((1.0 - prior) / prior)

    def __call__(self, fmap: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls_conv(fmap), self.reg_conv(fmap)


def flatten_head_output(cls_map: Tensor, reg_map: Tensor) -> tuple[Tensor, Tensor]:
    """(B, H, W) logits -> (A,) and (7B, H, W) deltas -> (A, 7) in anchor order."""
    b, h, w = cls_map.shape
    logits = tensor.reshape(tensor.transpose(cls_map, (1, 2, 0)), (h * w * b,))
    reg = tensor.reshape(reg_map, (b, 7, h, w))
    reg = tensor.transpose(reg, (2, 3, 0, 1))  # (H, W, B, 7)
    deltas = tensor.reshape(reg, (h * w * b, 7))
    return logits, deltas


def focal_loss_terms(logits: Tensor, is_positive: np.ndarray, cfg: LossConfig) -> Tensor:
    """Per-anchor focal loss values; probabilities clamped to [1e-7, 1-1e-7]."""
    p = tensor.clip(tensor.sigmoid(logits), 1e-7, 1.0 - 1e-7)
    pos = is_positive.astype(np.float64)
    pt = tensor.add(tensor.mul(p, pos), tensor.mul(tensor.add(tensor.mul(p, -1.0), 1.0), 1.0 - pos))
    one_minus = tensor.add(tensor.mul(pt, -1.0), 1.0)
    modulator = one_minus if cfg.gamma == 1.0 else tensor.exp(tensor.mul(tensor.log(one_minus), cfg.gamma))
    return tensor.mul(tensor.mul(modulator, tensor.log(pt)), -cfg.alpha)


def detection_loss(
    logits: Tensor,
    deltas: Tensor,
    targets: AnchorTargets,
    cfg: LossConfig,
) -> Tensor:
    """Focal classification + smooth-L1 regression loss for one class.

    Classification averages over non-ignored anchors normalized by the
    positive count (anchor count when there are no positives); the
    regression term sums smooth-L1 over the 7 offsets of each positive
    anchor, with the angle component as smooth_l1(sin(pred - target)),
    averaged over positives.
    """
    labels = targets.labels
    n_pos = targets.num_positive
    considered = labels >= 0

    focal = focal_loss_terms(logits, labels == 1, cfg)
    cls_norm = n_pos if n_pos > 0 else len(labels)
    cls_loss = tensor.mul(tensor.tsum(tensor.mul(focal, considered.astype(np.float64))), 1.0 / cls_norm)

    if n_pos == 0:
        return tensor.mul(cls_loss, cfg.beta_cls)

    pos_idx = np.flatnonzero(labels == 1)
    pred = deltas[pos_idx]  # (n_pos, 7)
    tgt = targets.deltas[pos_idx]
    geom_err = tensor.add(pred[:, :6], -tgt[:, :6])
    angle_err = tensor.sin(tensor.add(pred[:, 6], -tgt[:, 6]))
    reg_terms = tensor.concat([tensor.smooth_l1(geom_err), tensor.reshape(tensor.smooth_l1(angle_err), (n_pos, 1))], axis=1)
    reg_loss = tensor.mul(tensor.tsum(reg_terms), 1.0 / n_pos)

    return tensor.add(tensor.mul(cls_loss, cfg.beta_cls), tensor.mul(reg_loss, cfg.beta_reg))


def predict_class(
    logits: Tensor,
    deltas: Tensor,
    anchors: list[Box7],
    score_thresh: float,
    nms_iou: float,
) -> list[Detection]:
    """Decode one class head into NMS-filtered detections."""
    scores = 1.0 / (1.0 + np.exp(-logits.data))
    keep = np.flatnonzero(scores >= score_thresh)
    cands = [Detection(box=decode_box(deltas.data[i], anchors[i]), score=float(scores[i])) for i in keep]
    return nms(cands, iou_thresh=nms_iou, score_thresh=score_thresh)
