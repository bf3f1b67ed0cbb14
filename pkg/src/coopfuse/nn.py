"""Layers, parameter management, optimizers and checkpoint I/O."""

from __future__ import annotations

import json
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class with attribute-walk parameter discovery.

    Parameter names are derived from attribute paths, e.g.
    ``backbone.block1.conv.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Parameter]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield item

    def parameters(self) -> list[Parameter]:
        params = list(self.named_parameters())
        names = [p.name for p in params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_training(self, training: bool) -> None:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                value.set_training(training)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_training(training)
        if hasattr(self, "training"):
            self.training = training

    def set_norm_input_stats(self, enabled: bool) -> None:
        """Switch every normalization layer between running-buffer inference
        and per-input (instance) statistics."""
        for value in vars(self).values():
            if isinstance(value, Module):
                value.set_norm_input_stats(enabled)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.set_norm_input_stats(enabled)
        if hasattr(self, "use_input_stats"):
            self.use_input_stats = enabled


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int):
        self.weight = Parameter("weight", kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter("bias", np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import affine_last, matvec

        if x.ndim == 1:
            return matvec(self.weight, x, self.bias)
        return affine_last(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0):
        fan_in = in_ch * k * k
        self.weight = Parameter("weight", kaiming_uniform(rng, (out_ch, in_ch, k, k), fan_in))
        self.bias = Parameter("bias", np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0):
        fan_in = in_ch * k**3
        self.weight = Parameter("weight", kaiming_uniform(rng, (out_ch, in_ch, k, k, k), fan_in))
        self.bias = Parameter("bias", np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0):
        fan_in = in_ch * k * k
        self.weight = Parameter("weight", kaiming_uniform(rng, (in_ch, out_ch, k, k), fan_in))
        self.bias = Parameter("bias", np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Per-channel normalization; running stats live in non-trainable params."""

    def __init__(
        self,
        channels: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
        channel_axis: int = 0,
        use_input_stats: bool = False,
    ):
        self.gamma = Parameter("gamma", np.ones(channels))
        self.beta = Parameter("beta", np.zeros(channels))
        self.running_mean = Parameter("running_mean", np.zeros(channels), trainable=False)
        self.running_var = Parameter("running_var", np.ones(channels), trainable=False)
        self.momentum = momentum
        self.eps = eps
        self.channel_axis = channel_axis
        self.use_input_stats = use_input_stats
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data,
            self.running_var.data,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            channel_axis=self.channel_axis,
            use_input_stats=self.use_input_stats,
        )


class SGD:
    def __init__(self, params: list[Parameter], lr: float):
        self.params = [p for p in params if p.trainable]
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adam with decoupled-from-nothing classic L2 weight decay added to grads."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 0.1,
        weight_decay: float = 1e-4,
    ):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- checkpoint format ---------------------------------------------------
# One file: a single-line JSON manifest (parameter name, shape, byte
# offset into the blob), a newline, then a flat little-endian float64
# blob in manifest order. Round trips bit-exactly.


def save_checkpoint(path: str, params: list[Parameter], extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for p in sorted(params, key=lambda p: p.name):
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset, "trainable": p.trainable})
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": "coopfuse-checkpoint-v1", "params": entries, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> array, extra metadata)."""
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != "coopfuse-checkpoint-v1":
        raise ValueError("not a coopfuse checkpoint")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest.get("extra", {})


def load_into(module: Module, arrays: dict[str, np.ndarray]) -> None:
    params = {p.name: p for p in module.parameters()}
    missing = set(params) - set(arrays)
    unexpected = set(arrays) - set(params)
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    for name, p in params.items():
        if tuple(arrays[name].shape) != p.shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data = arrays[name].copy()
        p.zero_grad()
