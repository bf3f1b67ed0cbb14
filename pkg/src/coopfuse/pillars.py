"""Pillar encoding of point clouds and the multi-scale BEV backbone.

A point cloud is binned into x-y pillars, each point augmented with
offsets from the pillar's point mean and from the pillar's geometric
center, embedded per point and max-pooled per pillar, scattered back to
a pseudo-image, then passed through three stride-2 blocks whose outputs
are upsampled, concatenated and refined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops, tensor
from .nn import BatchNorm, Conv2d, ConvTranspose2d, Linear, Module
from .tensor import Tensor

POINT_FEATURES = 9  # x, y, z, intensity + 3 mean offsets + 2 center offsets


@dataclass(frozen=True)
class GridSpec:
    """BEV pillar grid: meter ranges plus the x/y pillar resolution."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    resolution: float

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if hi <= lo:
                raise ValueError("range must be increasing")
        for lo, hi in (self.x_range, self.y_range):
            cells = (hi - lo) / self.resolution
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError("range must be an integer multiple of resolution")

    @property
    def nx(self) -> int:
        return round((self.x_range[1] - self.x_range[0]) / self.resolution)

    @property
    def ny(self) -> int:
        return round((self.y_range[1] - self.y_range[0]) / self.resolution)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)


@dataclass
class PillarBatch:
    """Pillarized cloud: (P, N, 9) features, (P, 2) grid coords, counts."""

    features: np.ndarray
    coords: np.ndarray
    counts: np.ndarray

    @property
    def num_pillars(self) -> int:
        return self.features.shape[0]


def voxelize(points: np.ndarray, grid: GridSpec, max_points: int, max_pillars: int, seed: int = 0) -> PillarBatch:
    """Bin an (n, 4) cloud into pillars with augmented point features.

    Out-of-range points are discarded. Pillars with more than
    ``max_points`` points are subsampled with a seeded RNG; if more than
    ``max_pillars`` pillars are occupied, the fullest ones are kept.
    Padded point rows are all-zero. An empty batch is a valid result.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    (x0, x1), (y0, y1), (z0, z1) = grid.x_range, grid.y_range, grid.z_range
    keep = (
        (points[:, 0] >= x0)
        & (points[:, 0] < x1)
        & (points[:, 1] >= y0)
        & (points[:, 1] < y1)
        & (points[:, 2] >= z0)
        & (points[:, 2] < z1)
    )
    pts = points[keep]
    if pts.shape[0] == 0:
        return PillarBatch(
            features=np.zeros((0, max_points, POINT_FEATURES)),
            coords=np.zeros((0, 2), dtype=np.intp),
            counts=np.zeros(0, dtype=np.intp),
        )

    ix = np.floor((pts[:, 0] - x0) / grid.resolution).astype(np.intp)
    iy = np.floor((pts[:, 1] - y0) / grid.resolution).astype(np.intp)
    cell = ix * grid.ny + iy
    order = np.argsort(cell, kind="stable")
    pts, cell = pts[order], cell[order]
    uniq, starts, cnts = np.unique(cell, return_index=True, return_counts=True)

    if len(uniq) > max_pillars:
        # keep the fullest pillars; stable tie-break on cell id
        keep_idx = np.argsort(-cnts, kind="stable")[:max_pillars]
        keep_idx.sort()
        uniq, starts, cnts = uniq[keep_idx], starts[keep_idx], cnts[keep_idx]

    rng = np.random.default_rng(seed)
    P = len(uniq)
    feats = np.zeros((P, max_points, POINT_FEATURES))
    coords = np.stack([uniq // grid.ny, uniq % grid.ny], axis=1).astype(np.intp)
    counts = np.minimum(cnts, max_points).astype(np.intp)
    for p in range(P):
        seg = pts[starts[p] : starts[p] + cnts[p]]
        if cnts[p] > max_points:
            sel = rng.choice(cnts[p], size=max_points, replace=False)
            sel.sort()
            seg = seg[sel]
        n = seg.shape[0]
        mean = seg[:, :3].mean(axis=0)
        cx = x0 + (coords[p, 0] + 0.5) * grid.resolution
        cy = y0 + (coords[p, 1] + 0.5) * grid.resolution
        feats[p, :n, :4] = seg
        feats[p, :n, 4:7] = seg[:, :3] - mean
        feats[p, :n, 7] = seg[:, 0] - cx
        feats[p, :n, 8] = seg[:, 1] - cy
    return PillarBatch(features=feats, coords=coords, counts=counts)


class PillarFeatureNet(Module):
    """Per-point linear + batchnorm + relu, then max over each pillar."""

    def __init__(self, rng: np.random.Generator, c_in: int):
        self.linear = Linear(rng, POINT_FEATURES, c_in)
        self.bn = BatchNorm(c_in, channel_axis=1)
        self.c_in = c_in

    def __call__(self, batch: PillarBatch) -> Tensor:
        """Returns a (C_in, P) tensor; padded point slots never contribute."""
        if batch.num_pillars == 0:
            raise ValueError("pfn_forward on an empty pillar batch")
        P, N, D = batch.features.shape
        valid = np.arange(N)[None, :] < batch.counts[:, None]
        flat_idx = np.flatnonzero(valid.ravel())
        offsets = np.concatenate([[0], np.cumsum(batch.counts)[:-1]])

        x = tensor.Tensor(batch.features.reshape(P * N, D))
        x = ops.gather_rows(x, flat_idx)  # (V, D), segments contiguous per pillar
        h = self.linear(x)
        h = self.bn(h)
        h = tensor.relu(h)
        pooled = ops.segment_max(h, offsets)  # (P, C)
        return tensor.transpose(pooled, (1, 0))


def scatter(pillar_features: Tensor, coords: np.ndarray, grid: GridSpec) -> Tensor:
    """Scatter (C, P) pillar vectors onto a (C, nx, ny) pseudo-image."""
    c = pillar_features.shape[0]
    nx, ny = grid.shape
    if coords.shape[0] != pillar_features.shape[1]:
        raise ValueError("coords/pillar count mismatch")
    if coords.shape[0]:
        if coords.min() < 0 or coords[:, 0].max() >= nx or coords[:, 1].max() >= ny:
            raise ValueError("pillar coords outside grid")
        flat = coords[:, 0] * ny + coords[:, 1]
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate pillar coords")

    data = np.zeros((c, nx, ny))
    data[:, coords[:, 0], coords[:, 1]] = pillar_features.data

    def bwd(g):
        if pillar_features.requires_grad:
            pillar_features._accumulate(g[:, coords[:, 0], coords[:, 1]])

    return tensor.make_op(data, (pillar_features,), bwd)


class DownBlock(Module):
    def __init__(self, rng, in_ch: int, out_ch: int):
        self.conv = Conv2d(rng, in_ch, out_ch, k=3, stride=2, padding=1)
        self.bn = BatchNorm(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return tensor.relu(self.bn(self.conv(x)))


class Backbone(Module):
    """Three stride-2 blocks, per-scale upsampling, concat, refine conv.

    Input (C_in, 2H, 2W) -> output (C, H, W) with H = nx/2, W = ny/2.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        block_channels: tuple[int, int, int],
        up_channels: int,
        out_channels: int,
    ):
        b1, b2, b3 = block_channels
        self.block1 = DownBlock(rng, c_in, b1)
        self.block2 = DownBlock(rng, b1, b2)
        self.block3 = DownBlock(rng, b2, b3)
        self.up1 = ConvTranspose2d(rng, b1, up_channels, k=3, stride=1, padding=1)
        self.up2 = ConvTranspose2d(rng, b2, up_channels, k=2, stride=2, padding=0)
        self.up3 = ConvTranspose2d(rng, b3, up_channels, k=4, stride=4, padding=0)
        self.refine = Conv2d(rng, 3 * up_channels, out_channels, k=3, stride=1, padding=1)
        self.refine_bn = BatchNorm(out_channels)
        self.out_channels = out_channels

    def __call__(self, img: Tensor) -> Tensor:
        if img.shape[1] % 8 or img.shape[2] % 8:
            raise ValueError("pseudo-image extents must be divisible by 8")
        f1 = self.block1(img)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        up = tensor.concat([self.up1(f1), self.up2(f2), self.up3(f3)], axis=0)
        return tensor.relu(self.refine_bn(self.refine(up)))


class PillarFrontend(Module):
    """voxelize -> PFN -> scatter -> backbone, producing the (C, H, W) map."""

    def __init__(
        self,
        rng: np.random.Generator,
        grid: GridSpec,
        c_in: int,
        block_channels: tuple[int, int, int],
        up_channels: int,
        out_channels: int,
        max_points: int,
        max_pillars: int,
    ):
        self.grid = grid
        self.pfn = PillarFeatureNet(rng, c_in)
        self.backbone = Backbone(rng, c_in, block_channels, up_channels, out_channels)
        self.c_in = c_in
        self.max_points = max_points
        self.max_pillars = max_pillars

    def __call__(self, points: np.ndarray, seed: int = 0) -> Tensor:
        batch = voxelize(points, self.grid, self.max_points, self.max_pillars, seed=seed)
        if batch.num_pillars == 0:
            img = tensor.Tensor(np.zeros((self.c_in,) + self.grid.shape))
        else:
            img = scatter(self.pfn(batch), batch.coords, self.grid)
        return self.backbone(img)
