import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopfuse import geometry
from coopfuse.geometry import (
    Box7,
    LidarPose,
    check_rigid,
    invert_transform,
    pose_to_matrix,
    relative_transform,
    transform_box,
    transform_points,
    warp_feature_map,
    wrap_angle,
    yaw_of,
)
from coopfuse.tensor import Tensor

angles = st.floats(-10.0, 10.0, allow_nan=False)
coords = st.floats(-50.0, 50.0, allow_nan=False)


def pose_strategy():
    return st.builds(LidarPose, x=coords, y=coords, z=coords, roll=angles, yaw=angles, pitch=angles)


def test_wrap_angle_examples():
    assert wrap_angle(0.0) == 0.0
    assert abs(wrap_angle(3 * np.pi) - np.pi) < 1e-12
    assert abs(wrap_angle(-np.pi) - np.pi) < 1e-12
    assert abs(wrap_angle(np.pi + 0.1) - (-np.pi + 0.1)) < 1e-12


@given(angles)
def test_wrap_angle_range_and_equivalence(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert abs(np.sin(w) - np.sin(a)) < 1e-9
    assert abs(np.cos(w) - np.cos(a)) < 1e-9


def test_pose_rejects_nonfinite():
    with pytest.raises(ValueError):
        LidarPose(0, 0, 0, 0, np.nan, 0)


def test_identity_pose_matrix():
    T = pose_to_matrix(LidarPose(0, 0, 0, 0, 0, 0))
    assert np.array_equal(T, np.eye(4))


def test_pure_yaw_matrix():
    T = pose_to_matrix(LidarPose(1, 2, 3, 0, np.pi / 2, 0))
    assert np.allclose(T[:3, :3], [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    assert np.array_equal(T[:3, 3], [1, 2, 3])


def test_rotation_order_yaw_pitch_roll():
    # with yaw applied last (leftmost), a pitched sensor's forward axis is
    # first tilted down in x-z, then rotated in the plane by yaw
    pose = LidarPose(0, 0, 0, 0.0, np.pi / 2, np.pi / 6)
    fwd = pose_to_matrix(pose)[:3, :3] @ np.array([1.0, 0.0, 0.0])
    expected = np.array([0.0, np.cos(np.pi / 6), -np.sin(np.pi / 6)])
    assert np.allclose(fwd, expected, atol=1e-15)


@given(pose_strategy())
@settings(max_examples=60)
def test_pose_matrix_is_rigid(pose):
    check_rigid(pose_to_matrix(pose))


@given(pose_strategy())
@settings(max_examples=60)
def test_inverse_composes_to_identity(pose):
    T = pose_to_matrix(pose)
    assert np.abs(invert_transform(T) @ T - np.eye(4)).max() <= 1e-12


@given(pose_strategy(), pose_strategy())
@settings(max_examples=40)
def test_relative_transform_maps_cav_origin(ego, cav):
    T = relative_transform(ego, cav)
    check_rigid(T, tol=1e-9)
    # the cav origin expressed in ego coordinates
    world = pose_to_matrix(cav)[:3, 3]
    expect = invert_transform(pose_to_matrix(ego)) @ np.append(world, 1.0)
    assert np.abs(T @ np.array([0.0, 0.0, 0.0, 1.0]) - expect).max() <= 1e-10


def test_check_rigid_rejects_scaling():
    T = np.eye(4)
    T[0, 0] = 2.0
    with pytest.raises(ValueError):
        check_rigid(T)


def test_check_rigid_rejects_reflection():
    T = np.eye(4)
    T[0, 0] = -1.0
    with pytest.raises(ValueError):
        check_rigid(T)


def test_transform_points_preserves_intensity_and_distance():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(10, 4))
    T = pose_to_matrix(LidarPose(1, -2, 0.5, 0.1, 0.7, -0.2))
    out = transform_points(pts, T)
    assert np.array_equal(out[:, 3], pts[:, 3])
    d_in = np.linalg.norm(pts[0, :3] - pts[1, :3])
    d_out = np.linalg.norm(out[0, :3] - out[1, :3])
    assert abs(d_in - d_out) <= 1e-10


def test_transform_points_empty():
    out = transform_points(np.zeros((0, 4)), np.eye(4))
    assert out.shape == (0, 4)


def test_transform_box_pure_translation():
    box = Box7(1.0, 2.0, 0.5, 1.6, 3.9, 1.56, 0.3)
    T = np.eye(4)
    T[:3, 3] = [5.0, -1.0, 2.0]
    out = transform_box(box, T)
    assert (out.x, out.y, out.z) == (6.0, 1.0, 2.5)
    assert out.theta == box.theta
    assert (out.w, out.l, out.h) == (box.w, box.l, box.h)


def test_transform_box_yaw_adds_to_heading():
    box = Box7(1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.2)
    T = pose_to_matrix(LidarPose(0, 0, 0, 0, np.pi / 2, 0))
    out = transform_box(box, T)
    assert abs(out.theta - wrap_angle(0.2 + np.pi / 2)) <= 1e-12
    assert abs(out.x - 0.0) <= 1e-12 and abs(out.y - 1.0) <= 1e-12


def test_box_corners_axis_aligned():
    box = Box7(0.0, 0.0, 0.0, 2.0, 4.0, 1.0, 0.0)
    corners = box.bev_corners()
    assert np.allclose(sorted(corners[:, 0]), [-2, -2, 2, 2])
    assert np.allclose(sorted(corners[:, 1]), [-1, -1, 1, 1])


def test_box_requires_positive_dims():
    with pytest.raises(ValueError):
        Box7(0, 0, 0, 0.0, 1.0, 1.0, 0.0)


def test_yaw_of_matches_pose():
    T = pose_to_matrix(LidarPose(0, 0, 0, 0, 1.1, 0))
    assert abs(yaw_of(T) - 1.1) <= 1e-12


class TestWarp:
    cell = 1.0
    x_min = -4.0
    y_min = -4.0

    def _fmap(self, seed=0, c=2, n=8):
        return np.random.default_rng(seed).normal(size=(c, n, n))

    def test_identity_warp_bit_exact(self):
        f = self._fmap()
        out = warp_feature_map(Tensor(f), np.eye(4), self.x_min, self.y_min, self.cell)
        assert np.array_equal(out.data, f)

    def test_one_cell_shift_exact(self):
        f = self._fmap(1)
        T = np.eye(4)
        T[0, 3] = -self.cell  # source frame sits one cell behind the ego frame
        out = warp_feature_map(Tensor(f), T, self.x_min, self.y_min, self.cell)
        # ego cell i samples source cell i + 1
        assert np.array_equal(out.data[:, :-1, :], f[:, 1:, :])
        assert np.array_equal(out.data[:, -1, :], np.zeros_like(f[:, -1, :]))

    def test_out_of_range_cells_zero(self):
        f = np.ones((1, 8, 8))
        T = np.eye(4)
        T[0, 3] = 100.0
        out = warp_feature_map(Tensor(f), T, self.x_min, self.y_min, self.cell)
        assert np.array_equal(out.data, np.zeros_like(f))

    def test_rotation_roundtrip_small_error(self):
        # warp a smooth map by a small pose and back; interior cells should
        # come back close to the original. Bilinear interpolation is exact on
        # affine functions, so the residual comes only from the intermediate
        # grid's quantization of the rotated ramp.
        n = 12
        gx, gy = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
        f = (0.1 * gx + 0.05 * gy)[None]
        pose = LidarPose(0.4, -0.3, 0.0, 0.0, 0.15, 0.0)
        T = pose_to_matrix(pose)
        once = warp_feature_map(Tensor(f), T, -6.0, -6.0, self.cell)
        back = warp_feature_map(once, invert_transform(T), -6.0, -6.0, self.cell)
        interior = (slice(None), slice(3, -3), slice(3, -3))
        assert np.abs(back.data[interior] - f[interior]).max() <= 0.05

    def test_mass_not_created(self):
        # bilinear weights are a partition of unity, so total absolute mass
        # cannot grow under a warp of a non-negative map
        f = np.abs(self._fmap(3))
        T = pose_to_matrix(LidarPose(0.7, 0.2, 0.0, 0.0, 0.4, 0.0))
        out = warp_feature_map(Tensor(f), T, self.x_min, self.y_min, self.cell)
        assert out.data.sum() <= f.sum() + 1e-9

    def test_warp_is_differentiable(self):
        f = Tensor(self._fmap(4, c=1, n=6), requires_grad=True)
        T = pose_to_matrix(LidarPose(0.3, 0.1, 0.0, 0.0, 0.2, 0.0))
        warp_feature_map(f, T, -3.0, -3.0, 1.0).sum().backward()
        assert f.grad is not None
        assert np.isfinite(f.grad).all()
        assert f.grad.sum() > 0.0

    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(-1.0, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_warp_never_exceeds_input_range(self, tx, ty, yaw):
        f = np.abs(self._fmap(5, c=1, n=6))
        T = pose_to_matrix(LidarPose(tx, ty, 0.0, 0.0, yaw, 0.0))
        out = warp_feature_map(Tensor(f), T, -3.0, -3.0, 1.0)
        assert out.data.min() >= -1e-12
        assert out.data.max() <= f.max() + 1e-12


def test_planar_warp_ignores_z_translation():
    f = np.random.default_rng(6).normal(size=(1, 6, 6))
    T = np.eye(4)
    T[2, 3] = 5.0
    out = warp_feature_map(Tensor(f), T, -3.0, -3.0, 1.0)
    assert np.array_equal(out.data, f)
