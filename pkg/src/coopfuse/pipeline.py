"""End-to-end model assembly and the four fusion strategies.

A ``CoopModel`` bundles the pillar frontend, an optional learned fusion
module and per-class detection heads under one parameter namespace, so
a single checkpoint captures the whole pipeline.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fusion_mod
from . import nn, tensor
from .detector import (
    DEFAULT_ANCHORS,
    DEFAULT_MATCHING,
    AnchorTargets,
    ClassAnchor,
    ClassHead,
    LossConfig,
    MatchThresholds,
    detection_loss,
    flatten_head_output,
    generate_anchors,
    match_anchors,
    predict_class,
)
from .fusion import FUSION_MODES, FeatureStack, apply_fusion, build_fusion, stack_features
from .geometry import Box7, invert_transform, pose_to_matrix, relative_transform, transform_box, transform_points, warp_feature_map
from .metrics import Detection, nms
from .nn import Module
from .pillars import GridSpec, PillarFrontend
from .sim import FrameBundle
from .tensor import Tensor

CLASSES = ("vehicle", "pedestrian")


@dataclass(frozen=True)
class FrontendConfig:
    c_in: int = 16
    block_channels: tuple[int, int, int] = (16, 32, 64)
    up_channels: int = 32
    out_channels: int = 32
    max_points: int = 8
    max_pillars: int = 512


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 120
    milestones: tuple[int, ...] = (60, 90)
    lr_decay: float = 0.1
    patience: int = 30
    seed: int = 0
    adam_eps: float = 0.1
    weight_decay: float = 1e-4
    # fraction of the run after which batchnorm switches to its running
    # stats; with one frame per step the batch statistics are frame-specific,
    # and the weights must adapt to the statistics used at inference
    bn_freeze_frac: float = 0.5
    # intermediate fusion: draw a random CAV subgroup per frame each epoch
    # (robustness to missing senders) instead of always training on the
    # full nearest-first group used at evaluation
    vary_cav_count: bool = True

    def __post_init__(self):
        if not 0.0 <= self.bn_freeze_frac <= 1.0:
            raise ValueError("bn_freeze_frac must be in [0, 1]")


@dataclass(frozen=True)
class InferConfig:
    score_thresh: float = 0.2
    nms_iou: float = 0.15

    def __post_init__(self):
        if not (0.0 <= self.score_thresh <= 1.0 and 0.0 <= self.nms_iou <= 1.0):
            raise ValueError("thresholds must be in [0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSpec = field(
        default_factory=lambda: GridSpec(x_range=(-19.2, 19.2), y_range=(-19.2, 19.2), z_range=(-1.0, 4.0), resolution=1.2)
    )
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    fusion_mode: str = "s_ada"
    fusion_kernel: int = 3
    n_max: int = 3
    # one frame per optimizer step makes batch statistics frame-specific, so
    # inference normalizes each frame by its own statistics as well
    frame_stat_norm: bool = True
    anchors: dict[str, ClassAnchor] = field(default_factory=lambda: dict(DEFAULT_ANCHORS))
    matching: dict[str, MatchThresholds] = field(default_factory=lambda: dict(DEFAULT_MATCHING))
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    # -- JSON round trip -------------------------------------------------

    def to_json(self) -> str:
        def enc(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {k: enc(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, dict):
                return {k: enc(v) for k, v in obj.items()}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return json.dumps(enc(self), sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        raw = json.loads(text)
        return PipelineConfig(
            grid=GridSpec(
                x_range=tuple(raw["grid"]["x_range"]),
                y_range=tuple(raw["grid"]["y_range"]),
                z_range=tuple(raw["grid"]["z_range"]),
                resolution=raw["grid"]["resolution"],
            ),
            frontend=FrontendConfig(
                c_in=raw["frontend"]["c_in"],
                block_channels=tuple(raw["frontend"]["block_channels"]),
                up_channels=raw["frontend"]["up_channels"],
                out_channels=raw["frontend"]["out_channels"],
                max_points=raw["frontend"]["max_points"],
                max_pillars=raw["frontend"]["max_pillars"],
            ),
            fusion_mode=raw["fusion_mode"],
            fusion_kernel=raw["fusion_kernel"],
            n_max=raw["n_max"],
            frame_stat_norm=raw["frame_stat_norm"],
            anchors={k: ClassAnchor(**v) for k, v in raw["anchors"].items()},
            matching={k: MatchThresholds(**v) for k, v in raw["matching"].items()},
            loss=LossConfig(**raw["loss"]),
            train=TrainConfig(
                **{**raw["train"], "milestones": tuple(raw["train"]["milestones"])}
            ),
            infer=InferConfig(**raw["infer"]),
        )


class CoopModel(Module):
    """Frontend + optional learned fusion + per-class SSD heads."""

    def __init__(self, config: PipelineConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.frontend = PillarFrontend(
            rng,
            config.grid,
            c_in=config.frontend.c_in,
            block_channels=config.frontend.block_channels,
            up_channels=config.frontend.up_channels,
            out_channels=config.frontend.out_channels,
            max_points=config.frontend.max_points,
            max_pillars=config.frontend.max_pillars,
        )
        self.fusion = build_fusion(config.fusion_mode, rng, config.n_max, config.fusion_kernel)
        self.heads = [ClassHead(rng, config.frontend.out_channels) for _ in CLASSES]
        self.anchors = {cls: generate_anchors(config.grid, config.anchors[cls], cls) for cls in CLASSES}
        self.set_norm_input_stats(config.frame_stat_norm)

    def head_outputs(self, fused: Tensor) -> dict[str, tuple[Tensor, Tensor]]:
        """Flattened (logits, deltas) per class from a (1, C, H, W) fused map."""
        fmap = tensor.reshape(fused, fused.shape[1:])
        out = {}
        for cls, head in zip(CLASSES, self.heads):
            cls_map, reg_map = head(fmap)
            out[cls] = flatten_head_output(cls_map, reg_map)
        return out

    def detections_from(self, fused: Tensor) -> list[Detection]:
        dets: list[Detection] = []
        for cls, (logits, deltas) in self.head_outputs(fused).items():
            dets.extend(
                predict_class(
                    logits,
                    deltas,
                    self.anchors[cls],
                    score_thresh=self.config.infer.score_thresh,
                    nms_iou=self.config.infer.nms_iou,
                )
            )
        return dets


def select_cavs(frame: FrameBundle, n_max: int) -> list[int]:
    """Ego plus the nearest other CAVs, truncated to n_max (ego never dropped)."""
    ego = frame.poses[0]
    order = sorted(
        range(1, len(frame.poses)),
        key=lambda i: (frame.poses[i].x - ego.x) ** 2 + (frame.poses[i].y - ego.y) ** 2,
    )
    if len(frame.poses) > n_max:
        warnings.warn(f"frame has {len(frame.poses)} CAVs, truncating to nearest {n_max - 1} plus ego")
    return [0] + order[: n_max - 1]


def ego_frame_gts(frame: FrameBundle, grid: GridSpec | None = None) -> list[Box7]:
    """World-frame GT boxes projected into the ego frame; the ego's own
    vehicle body is excluded (it is the sensor platform, not a target).
    With a grid, boxes centered outside its x/y range are dropped: actors
    beyond the perception range are not detection targets."""
    T = invert_transform(pose_to_matrix(frame.poses[0]))
    ego_actor = frame.cav_actor_idx[0] if frame.cav_actor_idx else -1
    boxes = [transform_box(g, T) for i, g in enumerate(frame.gts) if i != ego_actor]
    if grid is not None:
        boxes = [
            b
            for b in boxes
            if grid.x_range[0] <= b.x <= grid.x_range[1] and grid.y_range[0] <= b.y <= grid.y_range[1]
        ]
    return boxes


def intermediate_feature_stack(
    model: CoopModel, frame: FrameBundle, cav_indices: list[int] | None = None
) -> FeatureStack:
    """Per-CAV frontend maps warped into the ego frame and stacked (ego slot 0)."""
    cfg = model.config
    if cav_indices is None:
        cav_indices = select_cavs(frame, cfg.n_max)
    ego = frame.poses[cav_indices[0]]
    cell = 2.0 * cfg.grid.resolution
    maps: list[Tensor] = []
    for i in cav_indices:
        fmap = model.frontend(frame.clouds[i], seed=frame.seed)
        if i == cav_indices[0]:
            maps.append(fmap)  # the ego map needs no warp
        else:
            T = relative_transform(ego, frame.poses[i])
            maps.append(warp_feature_map(fmap, T, cfg.grid.x_range[0], cfg.grid.y_range[0], cell))
    return stack_features(maps, cfg.n_max)


def run_no_fusion(model: CoopModel, frame: FrameBundle) -> list[Detection]:
    """Ego-only pipeline; other CAVs ignored."""
    fmap = model.frontend(frame.clouds[0], seed=frame.seed)
    fused = tensor.reshape(fmap, (1,) + fmap.shape)
    return model.detections_from(fused)


def run_early_fusion(model: CoopModel, frame: FrameBundle) -> list[Detection]:
    """All clouds transformed to the ego frame, merged, single pipeline pass."""
    cav_indices = select_cavs(frame, model.config.n_max)
    ego = frame.poses[cav_indices[0]]
    clouds = [
        transform_points(frame.clouds[i], relative_transform(ego, frame.poses[i])) if i != cav_indices[0] else frame.clouds[i]
        for i in cav_indices
    ]
    merged = np.concatenate(clouds) if clouds else np.zeros((0, 4))
    fmap = model.frontend(merged, seed=frame.seed)
    fused = tensor.reshape(fmap, (1,) + fmap.shape)
    return model.detections_from(fused)


def run_intermediate(model: CoopModel, frame: FrameBundle, cav_indices: list[int] | None = None) -> list[Detection]:
    """Per-CAV frontends, ego-frame warp, fusion operator, detection head."""
    mode = model.config.fusion_mode
    if mode in ("none", "early", "late"):
        raise ValueError(f"model fusion mode {mode!r} is not an intermediate fusion")
    stack = intermediate_feature_stack(model, frame, cav_indices)
    fused = apply_fusion(mode, model.fusion, stack)
    return model.detections_from(fused)


def run_late_fusion(model: CoopModel, frame: FrameBundle) -> list[Detection]:
    """Per-CAV ego-style inference, boxes pooled in the ego frame, joint NMS."""
    cav_indices = select_cavs(frame, model.config.n_max)
    ego = frame.poses[cav_indices[0]]
    pooled: list[Detection] = []
    for i in cav_indices:
        fmap = model.frontend(frame.clouds[i], seed=frame.seed)
        fused = tensor.reshape(fmap, (1,) + fmap.shape)
        dets = model.detections_from(fused)
        if i == cav_indices[0]:
            pooled.extend(dets)  # ego boxes stay untouched (identity transform would re-round)
        else:
            T = relative_transform(ego, frame.poses[i])
            pooled.extend(Detection(box=transform_box(d.box, T), score=d.score) for d in dets)
    out: list[Detection] = []
    for cls in CLASSES:
        out.extend(nms([d for d in pooled if d.cls == cls], iou_thresh=model.config.infer.nms_iou))
    return out


def run_strategy(model: CoopModel, frame: FrameBundle, strategy: str) -> list[Detection]:
    if strategy == "none":
        return run_no_fusion(model, frame)
    if strategy == "early":
        return run_early_fusion(model, frame)
    if strategy == "late":
        return run_late_fusion(model, frame)
    if strategy in ("max", "avg", "s_ada", "c_3d", "c_ada"):
        if strategy in fusion_mod.LEARNED_FUSIONS and strategy != model.config.fusion_mode:
            raise ValueError(f"model was built for fusion {model.config.fusion_mode!r}, not {strategy!r}")
        stack = intermediate_feature_stack(model, frame)
        fused = apply_fusion(strategy, model.fusion, stack)
        return model.detections_from(fused)
    raise ValueError(f"unknown strategy {strategy!r}")


def frame_targets(model: CoopModel, frame: FrameBundle) -> dict[str, AnchorTargets]:
    """Per-class anchor assignment against the ego-frame ground truth."""
    gts = ego_frame_gts(frame, model.config.grid)
    return {
        cls: match_anchors(model.anchors[cls], [g for g in gts if g.cls == cls], model.config.matching[cls])
        for cls in CLASSES
    }


def frame_loss(model: CoopModel, frame: FrameBundle, targets: dict[str, AnchorTargets], cav_indices: list[int] | None = None) -> Tensor:
    """Training loss for one frame under the model's fusion mode."""
    mode = model.config.fusion_mode
    if mode in ("none", "early", "late"):
        if mode == "early":
            dets_input = select_cavs(frame, model.config.n_max)
            ego = frame.poses[dets_input[0]]
            clouds = [
                transform_points(frame.clouds[i], relative_transform(ego, frame.poses[i]))
                if i != dets_input[0]
                else frame.clouds[i]
                for i in dets_input
            ]
            fmap = model.frontend(np.concatenate(clouds), seed=frame.seed)
        else:
            fmap = model.frontend(frame.clouds[0], seed=frame.seed)
        fused = tensor.reshape(fmap, (1,) + fmap.shape)
    else:
        stack = intermediate_feature_stack(model, frame, cav_indices)
        fused = apply_fusion(mode, model.fusion, stack)
    outputs = model.head_outputs(fused)
    loss = None
    for cls, (logits, deltas) in outputs.items():
        term = detection_loss(logits, deltas, targets[cls], model.config.loss)
        loss = term if loss is None else tensor.add(loss, term)
    return loss


# -- payload accounting ---------------------------------------------------
# On-wire format assumption: 32-bit floats for sensor/feature/box payloads,
# 64-bit floats for the 6-DoF pose.

POSE_BYTES = 6 * 8


def payload_report(frame: FrameBundle, config: PipelineConfig) -> dict:
    """Bytes each non-ego sender transmits per frame, per strategy."""
    h, w = config.grid.nx // 2, config.grid.ny // 2
    c = config.frontend.out_channels
    per_sender = {}
    for i in range(1, len(frame.poses)):
        n_points = int(frame.clouds[i].shape[0])
        per_sender[f"cav{i}"] = {
            "early_bytes": n_points * 4 * 4,
            "intermediate_bytes": c * h * w * 4 + POSE_BYTES,
        }
    return {
        "frame_id": frame.frame_id,
        "feature_map_shape": [c, h, w],
        "per_sender": per_sender,
        "late_bytes_per_box": (7 + 1) * 4,
        "late_fixed_bytes": POSE_BYTES,
    }
