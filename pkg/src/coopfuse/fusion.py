"""Intermediate fusion operators over stacked ego-aligned feature maps.

The input is an (n_max, C, H, W) stack where slot 0 is the ego vehicle,
slots [0, k) hold real CAV maps and the rest are zero padding. Max/avg
and the poolings inside the spatial-adaptive fusion only read the valid
slots; the fixed-width 3D-conv fusions consume the full padded stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops, tensor
from .nn import Conv3d, Linear, Module
from .tensor import Tensor

FUSION_MODES = ("none", "early", "late", "max", "avg", "s_ada", "c_3d", "c_ada")
LEARNED_FUSIONS = ("s_ada", "c_3d", "c_ada")


@dataclass
class FeatureStack:
    """(n_max, C, H, W) tensor with k valid slots; slot 0 is the ego."""

    data: Tensor
    valid: int

    def __post_init__(self):
        if not 1 <= self.valid <= self.data.shape[0]:
            raise ValueError(f"valid count {self.valid} out of range for {self.data.shape[0]} slots")

    @property
    def n_max(self) -> int:
        return self.data.shape[0]


def stack_features(maps: list[Tensor], n_max: int) -> FeatureStack:
    """Stack k ego-aligned maps (ego first) into a zero-padded FeatureStack."""
    if not maps or len(maps) > n_max:
        raise ValueError(f"need 1..{n_max} maps, got {len(maps)}")
    shape = maps[0].shape
    expanded = [tensor.reshape(m, (1,) + shape) for m in maps]
    if len(maps) < n_max:
        expanded.append(Tensor(np.zeros((n_max - len(maps),) + shape)))
    return FeatureStack(data=tensor.concat(expanded, axis=0), valid=len(maps))


def max_fusion(stack: FeatureStack) -> Tensor:
    return ops.reduce_max_axis0(stack.data, stack.valid)


def avg_fusion(stack: FeatureStack) -> Tensor:
    return ops.reduce_mean_axis0(stack.data, stack.valid)


class SAdaFusion(Module):
    """Spatial-adaptive fusion: per-slot max+avg pooling, 3D conv, relu."""

    def __init__(self, rng: np.random.Generator, kernel: int = 3):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        self.conv = Conv3d(rng, 2, 1, k=kernel, stride=1, padding=(kernel - 1) // 2)
        # start as max fusion (unit center tap on the max-pooled input, the
        # random taps shrunk): training refines a working operator instead
        # of first un-scrambling a random channel mixer
        c = (kernel - 1) // 2
        self.conv.weight.data *= 0.1
        self.conv.weight.data[0, 0, c, c, c] += 1.0

    def __call__(self, stack: FeatureStack) -> Tensor:
        s_max = max_fusion(stack)
        s_avg = avg_fusion(stack)
        spatial = tensor.concat([s_max, s_avg], axis=0)  # (2, C, H, W)
        return tensor.relu(self.conv(spatial))


class C3DFusion(Module):
    """Channel fusion: one 3D conv over the full n_max-slot stack, relu."""

    def __init__(self, rng: np.random.Generator, n_max: int, kernel: int = 3):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        self.n_max = n_max
        self.conv = Conv3d(rng, n_max, 1, k=kernel, stride=1, padding=(kernel - 1) // 2)
        # start as an ego passthrough (unit center tap on slot 0)
        c = (kernel - 1) // 2
        self.conv.weight.data *= 0.1
        self.conv.weight.data[0, 0, c, c, c] += 1.0

    def __call__(self, stack: FeatureStack) -> Tensor:
        if stack.n_max != self.n_max:
            raise ValueError(f"stack has {stack.n_max} slots, model expects {self.n_max}")
        return tensor.relu(self.conv(stack.data))


class CAdaFusion(Module):
    """Channel-adaptive fusion: squeeze-excitation slot gating + 3D conv."""

    def __init__(self, rng: np.random.Generator, n_max: int):
        self.n_max = n_max
        self.fc1 = Linear(rng, 2 * n_max, n_max)
        self.fc2 = Linear(rng, n_max, n_max)
        self.conv = Conv3d(rng, n_max, 1, k=3, stride=1, padding=1)
        # start as a (gate-scaled) ego passthrough, as in C3DFusion
        self.conv.weight.data *= 0.1
        self.conv.weight.data[0, 0, 1, 1, 1] += 1.0

    def __call__(self, stack: FeatureStack) -> Tensor:
        if stack.n_max != self.n_max:
            raise ValueError(f"stack has {stack.n_max} slots, model expects {self.n_max}")
        c_max = ops.global_pool3d(stack.data, "max")  # (n, 1, 1, 1)
        c_avg = ops.global_pool3d(stack.data, "avg")
        desc = tensor.concat([tensor.reshape(c_max, (self.n_max,)), tensor.reshape(c_avg, (self.n_max,))], axis=0)
        weights = tensor.sigmoid(self.fc2(tensor.relu(self.fc1(desc))))
        gated = ops.broadcast_mul(stack.data, tensor.reshape(weights, (self.n_max, 1, 1, 1)))
        return tensor.relu(self.conv(gated))


def build_fusion(mode: str, rng: np.random.Generator, n_max: int, kernel: int = 3) -> Module | None:
    """Instantiate the learned fusion module for a mode, or None."""
    if mode == "s_ada":
        return SAdaFusion(rng, kernel=kernel)
    if mode == "c_3d":
        return C3DFusion(rng, n_max, kernel=kernel)
    if mode == "c_ada":
        return CAdaFusion(rng, n_max)
    if mode in FUSION_MODES:
        return None
    raise ValueError(f"unknown fusion mode {mode!r}")


def apply_fusion(mode: str, module: Module | None, stack: FeatureStack) -> Tensor:
    if mode == "max":
        return max_fusion(stack)
    if mode == "avg":
        return avg_fusion(stack)
    if mode in LEARNED_FUSIONS:
        if module is None:
            raise ValueError(f"fusion mode {mode!r} needs a trained module")
        return module(stack)
    raise ValueError(f"fusion mode {mode!r} is not an intermediate fusion")
