"""Desk-scale cooperative LiDAR perception with intermediate BEV fusion."""

from .fusion import FeatureStack, avg_fusion, max_fusion
from .geometry import Box7, LidarPose
from .metrics import Detection, average_precision, evaluate, iou_bev, iou_3d, nms
from .pillars import GridSpec
from .pipeline import CoopModel, PipelineConfig
from .sim import FrameBundle, SceneConfig, SensorModel, generate_frames, read_frames, write_frames
from .tensor import Parameter, Tensor, no_grad
from .trainer import train

__all__ = [
    "Box7",
    "CoopModel",
    "Detection",
    "FeatureStack",
    "FrameBundle",
    "GridSpec",
    "LidarPose",
    "Parameter",
    "PipelineConfig",
    "SceneConfig",
    "SensorModel",
    "Tensor",
    "average_precision",
    "avg_fusion",
    "evaluate",
    "generate_frames",
    "iou_3d",
    "iou_bev",
    "max_fusion",
    "nms",
    "no_grad",
    "read_frames",
    "train",
    "write_frames",
]
