"""Evaluation harness: strategy evaluation, CAV-count sweeps, BEV rendering."""

from __future__ import annotations

import csv

import numpy as np

from . import tensor
from .geometry import Box7, invert_transform, pose_to_matrix, transform_points
from .metrics import Detection, EvalReport, evaluate
from .pipeline import CoopModel, FrameBundle, ego_frame_gts, run_intermediate, run_strategy, select_cavs


def evaluate_strategy(
    model: CoopModel,
    frames: list[FrameBundle],
    strategy: str,
    thresholds: dict[str, tuple[float, ...]] | None = None,
    use_3d: bool = False,
) -> EvalReport:
    """Run one fusion strategy over a frame set and score it."""
    model.set_training(False)
    det_frames: list[list[Detection]] = []
    gt_frames: list[list[Box7]] = []
    with tensor.no_grad():
        for frame in frames:
            det_frames.append(run_strategy(model, frame, strategy))
            gt_frames.append(ego_frame_gts(frame, model.config.grid))
    return evaluate(det_frames, gt_frames, thresholds, use_3d=use_3d)


def cav_sweep(
    model: CoopModel,
    frames: list[FrameBundle],
    k_values: list[int],
    thresholds: dict[str, tuple[float, ...]] | None = None,
) -> list[dict]:
    """AP as a function of the number of participating CAVs.

    For each k the ego plus its k-1 nearest CAVs are used; the subset is
    fixed per frame. Rows: {k, class, iou, ap}.
    """
    model.set_training(False)
    rows: list[dict] = []
    gt_frames = [ego_frame_gts(f, model.config.grid) for f in frames]
    for k in k_values:
        if k < 1:
            raise ValueError("k must be >= 1")
        det_frames: list[list[Detection]] = []
        with tensor.no_grad():
            for frame in frames:
                if len(frame.poses) < k:
                    raise ValueError(f"frame {frame.frame_id} has fewer than {k} CAVs")
                subset = select_cavs(frame, model.config.n_max)[:k]
                det_frames.append(run_intermediate(model, frame, cav_indices=subset))
        report = evaluate(det_frames, gt_frames, thresholds)
        for cls, per_iou in report.ap.items():
            for iou, ap in per_iou.items():
                rows.append({"k": k, "class": cls, "iou": iou, "ap": ap})
    return rows


def write_sweep_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["k", "class", "iou", "ap"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "ap": repr(float(row["ap"]))})


# -- BEV rendering --------------------------------------------------------


def _svg_polygon(corners: np.ndarray, color: str, scale: float, offset: float) -> str:
    pts = " ".join(f"{offset + c[0] * scale:.3f},{offset - c[1] * scale:.3f}" for c in corners)
    return f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>'


def render_bev(frame: FrameBundle, detections: list[Detection], path: str, extent: float = 20.0) -> None:
    """Deterministic SVG: points gray, GT boxes green, predictions red.

    Everything is drawn in the ego frame; the ego is marked with a blue
    triangle at the origin.
    """
    size = 640.0
    scale = size / (2.0 * extent)
    off = size / 2.0
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size:.0f}" '
        f'viewBox="0 0 {size:.0f} {size:.0f}">',
        f'<rect width="{size:.0f}" height="{size:.0f}" fill="white"/>',
    ]
    T_world_to_ego = invert_transform(pose_to_matrix(frame.poses[0]))
    for pose, cloud in zip(frame.poses, frame.clouds):
        world = transform_points(cloud, pose_to_matrix(pose))
        ego_pts = transform_points(world, T_world_to_ego)
        for x, y in ego_pts[:, :2]:
            if abs(x) <= extent and abs(y) <= extent:
                lines.append(f'<circle cx="{off + x * scale:.3f}" cy="{off - y * scale:.3f}" r="0.8" fill="gray"/>')
    for gt in ego_frame_gts(frame):
        lines.append(_svg_polygon(gt.bev_corners(), "green", scale, off))
    for det in detections:
        lines.append(_svg_polygon(det.box.bev_corners(), "red", scale, off))
    tri = np.array([[1.2, 0.0], [-0.8, 0.7], [-0.8, -0.7]])
    pts = " ".join(f"{off + p[0] * scale:.3f},{off - p[1] * scale:.3f}" for p in tri)
    lines.append(f'<polygon points="{pts}" fill="blue"/>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
