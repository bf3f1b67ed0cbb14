"""Pose handling and projection of points, boxes and BEV feature maps.

Poses follow the simulator convention: rotation R = Rz(yaw) Ry(pitch)
Rx(roll), translation (X, Y, Z). Feature-map warping uses only the
planar (x-y translation + yaw) part of the transform; points and boxes
use the full 3D rigid motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


def wrap_angle(theta: float) -> float:
    """Canonicalize an angle to (-pi, pi]."""
    t = float(theta) % (2.0 * np.pi)
    if t > np.pi:
        t -= 2.0 * np.pi
    elif t <= -np.pi:
        t += 2.0 * np.pi
    return t


@dataclass(frozen=True)
class LidarPose:
    x: float
    y: float
    z: float
    roll: float
    yaw: float
    pitch: float

    def __post_init__(self):
        for v in (self.x, self.y, self.z, self.roll, self.yaw, self.pitch):
            if not np.isfinite(v):
                raise ValueError("pose components must be finite")
        object.__setattr__(self, "roll", wrap_angle(self.roll))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "pitch", wrap_angle(self.pitch))

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.roll, self.yaw, self.pitch]


@dataclass(frozen=True)
class Box7:
    """Oriented 3D box: center (x, y, z), dims (w, l, h), heading theta.

    ``l`` extends along the heading direction, ``w`` across it.
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float
    cls: str = "vehicle"

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError("box dims must be positive")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.w, self.l, self.h, self.theta]

    def bev_corners(self) -> np.ndarray:
        """(4, 2) corner coordinates of the BEV rectangle, CCW."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        dx, dy = self.l / 2.0, self.w / 2.0
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def check_rigid(T: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Validate a 4x4 homogeneous rigid transform; returns it unchanged."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError("rigid transform must be 4x4")
    R = T[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=tol):
        raise ValueError("rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > 1e-8:
        raise ValueError("rotation block has det != 1")
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("bottom row must be (0, 0, 0, 1)")
    return T


def pose_to_matrix(pose: LidarPose) -> np.ndarray:
    """Pose -> 4x4 transform mapping sensor-frame coords to world frame."""
    T = np.eye(4)
    T[:3, :3] = _rot_z(pose.yaw) @ _rot_y(pose.pitch) @ _rot_x(pose.roll)
    T[:3, 3] = (pose.x, pose.y, pose.z)
    return T


def invert_transform(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def relative_transform(ego: LidarPose, cav: LidarPose) -> np.ndarray:
    """Transform mapping cav-frame coordinates into the ego frame."""
    return invert_transform(pose_to_matrix(ego)) @ pose_to_matrix(cav)


def yaw_of(T: np.ndarray) -> float:
    return float(np.arctan2(T[1, 0], T[0, 0]))


def transform_points(points: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an (n, 4) point array (x, y, z, intensity)."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        return points.reshape(0, 4)
    out = points.copy()
    out[:, :3] = points[:, :3] @ T[:3, :3].T + T[:3, 3]
    return out


def transform_box(box: Box7, T: np.ndarray) -> Box7:
    """Rigidly move a box: center by the full transform, heading by its yaw."""
    center = T[:3, :3] @ np.array([box.x, box.y, box.z]) + T[:3, 3]
    return Box7(
        x=float(center[0]),
        y=float(center[1]),
        z=float(center[2]),
        w=box.w,
        l=box.l,
        h=box.h,
        theta=wrap_angle(box.theta + yaw_of(T)),
        cls=box.cls,
    )


def warp_feature_map(fmap: Tensor, T: np.ndarray, x_min: float, y_min: float, cell: float) -> Tensor:
    """Resample a (C, nx, ny) BEV map from a CAV frame into the ego frame.

    ``fmap`` lives on the source (CAV) grid; the output lives on an
    ego-frame grid with the same extents. For each ego cell center the
    planar part of T^-1 gives the source location, which is bilinearly
    sampled (zero outside the grid). Differentiable w.r.t. map values.
    """
    _, nx, ny = fmap.shape
    Tinv = invert_transform(T)
    yaw = yaw_of(Tinv)
    tx, ty = Tinv[0, 3], Tinv[1, 3]

    xs = x_min + (np.arange(nx) + 0.5) * cell
    ys = y_min + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    c, s = np.cos(yaw), np.sin(yaw)
    src_x = c * gx - s * gy + tx
    src_y = s * gx + c * gy + ty
    # continuous grid-index coordinates of the source samples
    ix = (src_x - x_min) / cell - 0.5
    iy = (src_y - y_min) / cell - 0.5
    return ops.bilinear_sample(fmap, ix, iy)
