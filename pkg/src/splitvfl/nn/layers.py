"""Layer vocabulary with hand-written forward and backward passes.

Shapes passed to ``output_shape`` are per-sample (no batch axis); arrays
passed to ``forward`` carry a leading batch axis.  Parameter gradients are
accumulated (``+=``) so several backward calls may contribute before an
optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, ClassVar, Sequence

import numpy as np

from splitvfl.errors import CacheError, ShapeError
from splitvfl.nn import kernels
from splitvfl.nn.params import Parameter, ParameterStore

Shape = tuple[int, ...]


class Layer:
    kind: ClassVar[str] = ""

    def output_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def param_specs(self) -> list[tuple[str, Shape, int, int]]:
        """``(local_name, shape, fan_in, fan_out)``; fan values are 0 for biases."""
        return []

    def _forward(self, params: dict[str, Parameter], x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def _backward(self, params: dict[str, Parameter], saved: Any, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Cache:
    spec: Layer
    in_shape: Shape
    out_shape: Shape
    saved: Any = field(repr=False)
    used: bool = False


def forward(spec: Layer, params: dict[str, Parameter], x: np.ndarray, training: bool = True):
    """Run one layer; returns ``(output, cache)``.

    ``training`` is accepted for interface symmetry; no layer in this
    vocabulary behaves differently at evaluation time.
    """
    expected = spec.output_shape(tuple(x.shape[1:]))
    y, saved = spec._forward(params, x)
    if tuple(y.shape[1:]) != expected:  # pragma: no cover - layer bug guard
        raise ShapeError(f"{spec.kind}: produced {y.shape[1:]}, declared {expected}")
    return y, Cache(spec, tuple(x.shape), tuple(y.shape), saved)


def backward(spec: Layer, params: dict[str, Parameter], cache: Cache, grad_output: np.ndarray) -> np.ndarray:
    if cache.spec is not spec:
        raise CacheError(f"cache belongs to {cache.spec!r}, not {spec!r}")
    if cache.used:
        raise CacheError(f"stale cache for {spec.kind}: backward already ran")
    if tuple(grad_output.shape) != cache.out_shape:
        raise ShapeError(f"{spec.kind}: grad_output shape {grad_output.shape}, expected {cache.out_shape}")
    gx = spec._backward(params, cache.saved, grad_output)
    cache.used = True
    cache.saved = None
    return gx


def _expect_rank(kind: str, in_shape: Shape, rank: int) -> None:
    if len(in_shape) != rank:
        raise ShapeError(f"{kind}: expected rank-{rank} input per sample, got shape {in_shape}")


@dataclass(frozen=True)
class Dense(Layer):
    in_dim: int
    out_dim: int
    kind: ClassVar[str] = "dense"

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"dense: expected input ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def param_specs(self):
        return [
            ("weight", (self.out_dim, self.in_dim), self.in_dim, self.out_dim),
            ("bias", (self.out_dim,), 0, 0),
        ]

    def _forward(self, params, x):
        w, b = params["weight"].value, params["bias"].value
        return x @ w.T + b, x

    def _backward(self, params, x, grad):
        params["weight"].grad += grad.T @ x
        params["bias"].grad += grad.sum(axis=0)
        return grad @ params["weight"].value


@dataclass(frozen=True)
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel: int = 3
    kind: ClassVar[str] = "conv2d"

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ShapeError(f"conv2d: stride must be 1 or 2, got {self.stride}")
        if self.kernel not in (1, 3):
            raise ShapeError(f"conv2d: kernel must be 1 or 3, got {self.kernel}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def output_shape(self, in_shape):
        _expect_rank(self.kind, in_shape, 3)
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d: expected {self.in_channels} input channels, got {c}")
        ho = kernels.conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = kernels.conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: input {in_shape} too small")
        return (self.out_channels, ho, wo)

    def param_specs(self):
        k2 = self.kernel * self.kernel
        return [
            ("weight", (self.out_channels, self.in_channels, self.kernel, self.kernel),
             self.in_channels * k2, self.out_channels * k2),
            ("bias", (self.out_channels,), 0, 0),
        ]

    def _forward(self, params, x):
        y = kernels.conv2d_forward(x, params["weight"].value, self.stride, self.padding)
        y += params["bias"].value[None, :, None, None]
        return y, x

    def _backward(self, params, x, grad):
        gx, gw = kernels.conv2d_backward(x, params["weight"].value, grad, self.stride, self.padding)
        params["weight"].grad += gw
        params["bias"].grad += grad.sum(axis=(0, 2, 3))
        return gx


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def _forward(self, params, x):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def _backward(self, params, mask, grad):
        return np.where(mask, grad, 0).astype(grad.dtype, copy=False)


@dataclass(frozen=True)
class MaxPool2d(Layer):
    window: int = 2
    stride: int = 2
    kind: ClassVar[str] = "maxpool2d"

    def output_shape(self, in_shape):
        _expect_rank(self.kind, in_shape, 3)
        c, h, w = in_shape
        if h < self.window or w < self.window:
            raise ShapeError(f"maxpool2d: input {in_shape} smaller than window {self.window}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def _forward(self, params, x):
        y, arg = kernels.maxpool_forward(x, self.window, self.stride)
        return y, (arg, x.shape)

    def _backward(self, params, saved, grad):
        arg, in_shape = saved
        return kernels.maxpool_backward(grad, arg, in_shape, self.window, self.stride)


@dataclass(frozen=True)
class GlobalAvgPool(Layer):
    kind: ClassVar[str] = "global_avg_pool"

    def output_shape(self, in_shape):
        _expect_rank(self.kind, in_shape, 3)
        return (in_shape[0],)

    def _forward(self, params, x):
        return x.mean(axis=(2, 3), dtype=x.dtype), x.shape

    def _backward(self, params, in_shape, grad):
        h, w = in_shape[2], in_shape[3]
        scale = grad.dtype.type(1.0 / (h * w))
        return np.broadcast_to((grad * scale)[:, :, None, None], in_shape).copy()


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def _forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def _backward(self, params, in_shape, grad):
        return grad.reshape(in_shape)


@dataclass(frozen=True)
class ResidualBlock(Layer):
    """conv3x3 -> relu -> conv3x3, plus shortcut, then relu.

    With ``downsample`` the first conv has stride 2 and doubles the channel
    count, and the shortcut becomes a strided 1x1 projection.
    """

    channels: int
    downsample: bool = False
    kind: ClassVar[str] = "residual_block"

    @property
    def out_channels(self) -> int:
        return self.channels * 2 if self.downsample else self.channels

    def _parts(self):
        stride = 2 if self.downsample else 1
        parts = {
            "conv1": Conv2d(self.channels, self.out_channels, stride=stride),
            "conv2": Conv2d(self.out_channels, self.out_channels),
        }
        if self.downsample:
            parts["proj"] = Conv2d(self.channels, self.out_channels, stride=2, kernel=1)
        return parts

    def output_shape(self, in_shape):
        parts = self._parts()
        mid = parts["conv1"].output_shape(in_shape)
        return parts["conv2"].output_shape(mid)

    def param_specs(self):
        return [
            (f"{part}.{name}", shape, fi, fo)
            for part, layer in self._parts().items()
            for name, shape, fi, fo in layer.param_specs()
        ]

    def _forward(self, params, x):
        parts = self._parts()
        sub = {part: {k[len(part) + 1:]: p for k, p in params.items() if k.startswith(part + ".")}
               for part in parts}
        h1, c1 = forward(parts["conv1"], sub["conv1"], x)
        a1, r1 = forward(ReLU(), {}, h1)
        h2, c2 = forward(parts["conv2"], sub["conv2"], a1)
        if self.downsample:
            sc, cp = forward(parts["proj"], sub["proj"], x)
        else:
            sc, cp = x, None
        out, r2 = forward(ReLU(), {}, h2 + sc)
        return out, (parts, sub, c1, r1, c2, cp, r2)

    def _backward(self, params, saved, grad):
        parts, sub, c1, r1, c2, cp, r2 = saved
        g = backward(r2.spec, {}, r2, grad)
        ga1 = backward(parts["conv2"], sub["conv2"], c2, g)
        gh1 = backward(r1.spec, {}, r1, ga1)
        gx = backward(parts["conv1"], sub["conv1"], c1, gh1)
        if cp is not None:
            gx = gx + backward(parts["proj"], sub["proj"], cp, g)
        else:
            gx = gx + g
        return gx


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, GlobalAvgPool, Flatten, ResidualBlock)}


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Stack:
    """A validated chain of layers whose parameters live under ``prefix``."""

    def __init__(self, layers: Sequence[Layer], input_shape: Shape, prefix: str = ""):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.prefix = prefix
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def _name(self, i: int, local: str) -> str:
        return f"{self.prefix}{i}.{local}"

    def init(self, rng: np.random.Generator, store: ParameterStore | None = None, dtype=np.float32) -> ParameterStore:
        """Glorot-uniform weights, zero biases, drawn in layer order from ``rng``."""
        store = ParameterStore() if store is None else store
        for i, layer in enumerate(self.layers):
            for local, shape, fan_in, fan_out in layer.param_specs():
                if fan_in:
                    b = glorot_bound(fan_in, fan_out)
                    value = rng.uniform(-b, b, size=shape).astype(dtype)
                else:
                    value = np.zeros(shape, dtype=dtype)
                store.add(self._name(i, local), value)
        return store

    def params_for(self, store: ParameterStore, i: int) -> dict[str, Parameter]:
        return store.view(f"{self.prefix}{i}.")

    def forward(self, store: ParameterStore, x: np.ndarray, training: bool = True):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input (B, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = forward(layer, self.params_for(store, i), x, training)
            caches.append(cache)
        return x, caches

    def backward(self, store: ParameterStore, caches: list[Cache], grad: np.ndarray) -> np.ndarray:
        if len(caches) != len(self.layers):
            raise CacheError(f"expected {len(self.layers)} caches, got {len(caches)}")
        for i in range(len(self.layers) - 1, -1, -1):
            grad = backward(self.layers[i], self.params_for(store, i), caches[i], grad)
        return grad


def init_params(layers: Sequence[Layer], seed: int, input_shape: Shape | None = None,
                prefix: str = "") -> ParameterStore:
    """Build a parameter store for a layer chain; identical inputs give identical bytes."""
    if input_shape is None:
        first = layers[0]
        if not isinstance(first, Dense):
            raise ShapeError("input_shape is required unless the first layer is dense")
        input_shape = (first.in_dim,)
    stack = Stack(layers, input_shape, prefix)
    return stack.init(np.random.default_rng(seed))
