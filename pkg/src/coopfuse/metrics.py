"""Rotated-box IoU, non-maximum suppression and average precision."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box7


@dataclass(frozen=True)
class Detection:
    box: Box7
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError("score must be finite in [0, 1]")

    @property
    def cls(self) -> str:
        return self.box.cls


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(poly: list[np.ndarray], a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Sutherland-Hodgman: keep the part of ``poly`` left of edge a->b."""
    edge = b - a
    out: list[np.ndarray] = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        dq = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if dp >= 0:
            out.append(p)
        if (dp > 0 and dq < 0) or (dp < 0 and dq > 0):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return out


def intersection_area(corners_a: np.ndarray, corners_b: np.ndarray) -> float:
    """Area of the intersection of two convex CCW polygons."""
    poly = [c for c in corners_a]
    for i in range(len(corners_b)):
        poly = _clip_polygon(poly, corners_b[i], corners_b[(i + 1) % len(corners_b)])
        if len(poly) < 3:
            return 0.0
    return _polygon_area(np.array(poly))


def iou_bev(a: Box7, b: Box7) -> float:
    """IoU of the rotated BEV rectangles of two boxes."""
    area_a = a.w * a.l
    area_b = b.w * b.l
    if area_a <= 0 or area_b <= 0:
        raise ValueError("degenerate zero-area box")
    inter = intersection_area(a.bev_corners(), b.bev_corners())
    return inter / (area_a + area_b - inter)


def iou_3d(a: Box7, b: Box7) -> float:
    """Volume IoU: BEV intersection area times vertical overlap."""
    if a.w * a.l * a.h <= 0 or b.w * b.l * b.h <= 0:
        raise ValueError("degenerate zero-volume box")
    inter_bev = intersection_area(a.bev_corners(), b.bev_corners())
    z_lo = max(a.z - a.h / 2, b.z - b.h / 2)
    z_hi = min(a.z + a.h / 2, b.z + b.h / 2)
    inter = inter_bev * max(0.0, z_hi - z_lo)
    vol_a = a.w * a.l * a.h
    vol_b = b.w * b.l * b.h
    return inter / (vol_a + vol_b - inter)


def nms(dets: list[Detection], iou_thresh: float, score_thresh: float = 0.0) -> list[Detection]:
    """Greedy per-class NMS; score ties keep stable input order.

    Detections below ``score_thresh`` are dropped first; a kept box
    suppresses remaining boxes with BEV IoU strictly above ``iou_thresh``.
    """
    cand = [d for d in dets if d.score >= score_thresh]
    order = sorted(range(len(cand)), key=lambda i: -cand[i].score)
    kept: list[Detection] = []
    suppressed = [False] * len(cand)
    for oi, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(cand[i])
        for j in order[oi + 1 :]:
            if not suppressed[j] and iou_bev(cand[i].box, cand[j].box) > iou_thresh:
                suppressed[j] = True
    return kept


def _match_frames(
    det_frames: list[list[Detection]],
    gt_frames: list[list[Box7]],
    iou_thresh: float,
    iou_fn,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Pool detections over frames; returns (scores, tp_flags, n_gt)."""
    scores: list[float] = []
    flags: list[bool] = []
    n_gt = sum(len(g) for g in gt_frames)
    for dets, gts in zip(det_frames, gt_frames):
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        matched = [False] * len(gts)
        for i in order:
            best, best_iou = -1, 0.0
            for j, gt in enumerate(gts):
                if matched[j]:
                    continue
                v = iou_fn(dets[i].box, gt)
                if v >= iou_thresh and v > best_iou:
                    best, best_iou = j, v
            if best >= 0:
                matched[best] = True
                flags.append(True)
            else:
                flags.append(False)
            scores.append(dets[i].score)
    return np.array(scores), np.array(flags, dtype=bool), n_gt


def _ap_from_matches(scores: np.ndarray, flags: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """All-point-interpolation AP plus the PR samples."""
    if n_gt == 0:
        return (1.0 if len(scores) == 0 else 0.0), np.zeros(0), np.zeros(0)
    if len(scores) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, integrated over recall
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - r_prev) * p
        r_prev = r
    return float(ap), recall, env


def average_precision(
    det_frames: list[list[Detection]],
    gt_frames: list[list[Box7]],
    iou_thresh: float,
    use_3d: bool = False,
) -> float:
    """AP over pooled frames with greedy highest-IoU matching."""
    iou_fn = iou_3d if use_3d else iou_bev
    scores, flags, n_gt = _match_frames(det_frames, gt_frames, iou_thresh, iou_fn)
    return _ap_from_matches(scores, flags, n_gt)[0]


DEFAULT_THRESHOLDS = {"vehicle": (0.5, 0.7), "pedestrian": (0.1,)}


@dataclass
class EvalReport:
    """Per-class AP at each IoU threshold, PR samples and TP/FP/FN counts."""

    ap: dict[str, dict[float, float]] = field(default_factory=dict)
    pr_curves: dict[str, dict[float, tuple[list[float], list[float]]]] = field(default_factory=dict)
    counts: dict[str, dict[float, dict[str, int]]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "ap": {c: {str(t): v for t, v in d.items()} for c, d in self.ap.items()},
            "counts": {c: {str(t): v for t, v in d.items()} for c, d in self.counts.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def write_pr_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou_thresh", "recall", "precision"])
            for cls in sorted(self.pr_curves):
                for thresh in sorted(self.pr_curves[cls]):
                    recall, precision = self.pr_curves[cls][thresh]
                    for r, p in zip(recall, precision):
                        writer.writerow([cls, thresh, repr(float(r)), repr(float(p))])


def evaluate(
    det_frames: list[list[Detection]],
    gt_frames: list[list[Box7]],
    thresholds: dict[str, tuple[float, ...]] | None = None,
    use_3d: bool = False,
) -> EvalReport:
    """Per-class AP evaluation over a frame set."""
    thresholds = thresholds if thresholds is not None else DEFAULT_THRESHOLDS
    iou_fn = iou_3d if use_3d else iou_bev
    report = EvalReport()
    for cls, taus in thresholds.items():
        cls_dets = [[d for d in frame if d.cls == cls] for frame in det_frames]
        cls_gts = [[g for g in frame if g.cls == cls] for frame in gt_frames]
        report.ap[cls] = {}
        report.pr_curves[cls] = {}
        report.counts[cls] = {}
        for tau in taus:
            scores, flags, n_gt = _match_frames(cls_dets, cls_gts, tau, iou_fn)
            ap, recall, precision = _ap_from_matches(scores, flags, n_gt)
            tp = int(flags.sum())
            report.ap[cls][tau] = ap
            report.pr_curves[cls][tau] = (recall.tolist(), precision.tolist())
            report.counts[cls][tau] = {"tp": tp, "fp": int(len(flags) - tp), "fn": n_gt - tp}
    return report
