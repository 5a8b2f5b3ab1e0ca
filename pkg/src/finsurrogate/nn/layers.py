"""Layer specifications and their trainable implementations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from ..rng import stream
from . import functional as F

KINDS = (
    "conv2d",
    "depthwise_separable_conv2d",
    "maxpool2d",
    "relu",
    "flatten",
    "dense",
    "global_avg_pool",
    "residual",
)


class SpecError(ValueError):
    """Illegal layer or network specification."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0  # conv / separable output channels
    kernel: int = 3  # conv kernel or pool window
    stride: int = 1
    padding: int = -1  # -1 means "same" for stride 1
    units: int = 0  # dense width
    main: tuple[LayerSpec, ...] = ()
    skip: tuple[LayerSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding < 0 else self.padding


def conv(filters: int, kernel: int = 3, stride: int = 1, padding: int = -1) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, kernel=kernel, stride=stride, padding=padding)


def sepconv(filters: int) -> LayerSpec:
    return LayerSpec("depthwise_separable_conv2d", filters=filters, kernel=3)


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", kernel=size, stride=size, padding=0)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global_avg_pool")


def residual(main: list[LayerSpec], skip: list[LayerSpec]) -> LayerSpec:
    return LayerSpec("residual", main=tuple(main), skip=tuple(skip))


def output_shape(spec: LayerSpec, shape: tuple[int, ...], in_skip: bool = False) -> tuple[int, ...]:
    """Propagate an activation shape (without batch axis) through one layer."""
    k = spec.kind
    if k in ("conv2d", "depthwise_separable_conv2d"):
        if len(shape) != 3:
            raise SpecError(f"{k} needs a (C, H, W) input, got {shape}")
        allowed = (1, 3) if (in_skip and k == "conv2d") else (3,)
        if spec.kernel not in allowed:
            raise SpecError(f"{k} kernel must be in {allowed}, got {spec.kernel}")
        if spec.filters < 1:
            raise SpecError(f"{k} needs filters >= 1")
        stride = spec.stride if k == "conv2d" else 1
        h = F.conv_output_size(shape[1], spec.kernel, stride, spec.pad)
        w = F.conv_output_size(shape[2], spec.kernel, stride, spec.pad)
        if h < 1 or w < 1:
            raise SpecError(f"{k} produces an empty output from {shape}")
        return (spec.filters, h, w)
    if k == "maxpool2d":
        if spec.kernel != 2:
            raise SpecError("max pooling is 2x2")
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise SpecError(f"cannot pool {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if k == "relu":
        return shape
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "global_avg_pool":
        if len(shape) != 3:
            raise SpecError("global average pooling needs (C, H, W)")
        return (shape[0],)
    if k == "dense":
        if len(shape) != 1:
            raise SpecError(f"dense needs a flat input, got {shape}")
        if spec.units < 1:
            raise SpecError("dense needs units >= 1")
        return (spec.units,)
    if k == "residual":
        a = shape
        for s in spec.main:
            a = output_shape(s, a)
        b = shape
        for s in spec.skip:
            b = output_shape(s, b, in_skip=True)
        if a != b:
            raise SpecError(f"residual branches disagree: main {a} vs skip {b}")
        return a
    raise SpecError(k)


def param_count(spec: LayerSpec, shape: tuple[int, ...]) -> int:
    """Closed-form trainable parameter count of one layer given its input shape."""
    k = spec.kind
    if k == "conv2d":
        return spec.filters * (shape[0] * spec.kernel * spec.kernel + 1)
    if k == "depthwise_separable_conv2d":
        c = shape[0]
        return c * spec.kernel * spec.kernel + c * spec.filters + spec.filters
    if k == "dense":
        return shape[0] * spec.units + spec.units
    if k == "residual":
        total, a = 0, shape
        for s in spec.main:
            total += param_count(s, a)
            a = output_shape(s, a)
        b = shape
        for s in spec.skip:
            total += param_count(s, b)
            b = output_shape(s, b, in_skip=True)
        return total
    return 0


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    name: str = "network"

    def shapes(self) -> list[tuple[int, ...]]:
        out = [tuple(self.input_shape)]
        for s in self.layers:
            out.append(output_shape(s, out[-1]))
        return out

    def validate(self) -> None:
        shapes = self.shapes()
        if not self.layers or self.layers[-1].kind != "dense" or self.layers[-1].units != 1:
            raise SpecError("network must end in a single linear output neuron")
        if shapes[-1] != (1,):
            raise SpecError(f"network output shape {shapes[-1]} is not (1,)")

    def n_params(self) -> int:
        shapes = self.shapes()
        return sum(param_count(s, shp) for s, shp in zip(self.layers, shapes))

    def with_input(self, size: int) -> NetworkSpec:
        return replace(self, input_shape=(self.input_shape[0], size, size))

    def dumps(self) -> str:
        lines = [f"name {self.name}", "input " + " ".join(map(str, self.input_shape))]
        for s in self.layers:
            if s.kind == "residual":
                lines.append("residual")
                lines += ["  main " + _layer_line(m) for m in s.main]
                lines += ["  skip " + _layer_line(m) for m in s.skip]
                lines.append("end")
            else:
                lines.append(_layer_line(s))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> NetworkSpec:
        name, shape, layers = "network", None, []
        block = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            head, _, rest = line.partition(" ")
            if head == "name":
                name = rest
            elif head == "input":
                shape = tuple(int(t) for t in rest.split())
            elif head == "residual":
                block = {"main": [], "skip": []}
            elif head == "end":
                if block is None:
                    raise SpecError("'end' without 'residual'")
                layers.append(residual(block["main"], block["skip"]))
                block = None
            elif head in ("main", "skip"):
                if block is None:
                    raise SpecError(f"'{head}' outside a residual block")
                block[head].append(_parse_layer(rest))
            else:
                layers.append(_parse_layer(line))
        if shape is None or len(shape) != 3:
            raise SpecError("missing or malformed 'input' line")
        return cls(shape, tuple(layers), name)


_FIELDS = ("filters", "kernel", "stride", "padding", "units")


def _layer_line(s: LayerSpec) -> str:
    return " ".join([s.kind] + [f"{f}={getattr(s, f)}" for f in _FIELDS])


def _parse_layer(line: str) -> LayerSpec:
    kind, *kv = line.split()
    kwargs = {}
    for item in kv:
        key, _, val = item.partition("=")
        if key not in _FIELDS:
            raise SpecError(f"unknown layer field {key!r}")
        kwargs[key] = int(val)
    return LayerSpec(kind, **kwargs)


# ---------------------------------------------------------------- implementations


class Layer:
    kind = ""

    def __init__(self) -> None:
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        # the first layer's input gradient is never used during training
        self.need_dx = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> Iterator[Layer]:
        yield self


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        k = spec.kernel
        self.stride, self.padding = spec.stride, spec.pad
        self.params = [_he(rng, (spec.filters, in_ch, k, k), in_ch * k * k), np.zeros(spec.filters)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        out, self._cache = F.conv2d_forward(x, self.params[0], self.params[1], self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache, self.need_dx)
        self.grads = [dw, db]
        return dx


class SeparableConv2D(Layer):
    kind = "depthwise_separable_conv2d"

    def __init__(self, in_ch: int, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        k = spec.kernel
        self.padding = spec.pad
        self.params = [
            _he(rng, (in_ch, k, k), k * k),
            _he(rng, (spec.filters, in_ch), in_ch),
            np.zeros(spec.filters),
        ]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        h, self._dcache = F.depthwise_forward(x, self.params[0], self.padding)
        out, self._pcache = F.pointwise_forward(h, self.params[1], self.params[2])
        return out

    def backward(self, dout):
        dh, dwp, db = F.pointwise_backward(dout, self._pcache)
        dx, dwd = F.depthwise_backward(dh, self._dcache)
        self.grads = [dwd, dwp, db]
        return dx


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def forward(self, x):
        out, self._cache = F.maxpool2d_forward(x, 2)
        return out

    def backward(self, dout):
        return F.maxpool2d_backward(dout, self._cache)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._mask)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), self._shape).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        self.params = [_he(rng, (n_in, spec.units), n_in), np.zeros(spec.units)]
        self.grads = [np.zeros_like(p) for p in self.params]

    def forward(self, x):
        out, self._x = F.dense_forward(x, self.params[0], self.params[1])
        return out

    def backward(self, dout):
        dx, dw, db = F.dense_backward(dout, self._x, self.params[0])
        self.grads = [dw, db]
        return dx


class Residual(Layer):
    kind = "residual"

    def __init__(self, main: list[Layer], skip: list[Layer]):
        super().__init__()
        self.main, self.skip = main, skip

    def forward(self, x):
        a = x
        for layer in self.main:
            a = layer.forward(a)
        b = x
        for layer in self.skip:
            b = layer.forward(b)
        return a + b

    def backward(self, dout):
        da = dout
        for layer in reversed(self.main):
            da = layer.backward(da)
        db = dout
        for layer in reversed(self.skip):
            db = layer.backward(db)
        return da + db

    def children(self):
        for layer in self.main + self.skip:
            yield from layer.children()


def _instantiate(spec: LayerSpec, shape, seed: int, counter: list[int], in_skip=False) -> Layer:
    idx = counter[0]
    counter[0] += 1
    rng = stream(seed, "init", idx)
    k = spec.kind
    if k == "conv2d":
        return Conv2D(shape[0], spec, rng)
    if k == "depthwise_separable_conv2d":
        return SeparableConv2D(shape[0], spec, rng)
    if k == "maxpool2d":
        return MaxPool2D()
    if k == "relu":
        return ReLU()
    if k == "flatten":
        return Flatten()
    if k == "global_avg_pool":
        return GlobalAvgPool()
    if k == "dense":
        return Dense(shape[0], spec, rng)
    main, a = [], shape
    for s in spec.main:
        main.append(_instantiate(s, a, seed, counter))
        a = output_shape(s, a)
    skip, b = [], shape
    for s in spec.skip:
        skip.append(_instantiate(s, b, seed, counter, in_skip=True))
        b = output_shape(s, b, in_skip=True)
    return Residual(main, skip)


@dataclass(eq=False)
class Network:
    """A built, trainable network. Parameters are float64 arrays updated in place."""

    spec: NetworkSpec
    layers: list[Layer] = field(default_factory=list)

    @classmethod
    def from_spec(cls, spec: NetworkSpec, seed: int = 0) -> Network:
        spec.validate()
        counter = [0]
        layers, shape = [], tuple(spec.input_shape)
        for s in spec.layers:
            layers.append(_instantiate(s, shape, seed, counter))
            shape = output_shape(s, shape)
        return cls(spec, layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(f"input {x.shape[1:]} does not match network input {self.spec.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        self.layers[0].need_dx = need_input_grad
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def leaves(self) -> list[Layer]:
        return [leaf for layer in self.layers for leaf in layer.children()]

    def params(self) -> list[np.ndarray]:
        return [p for leaf in self.leaves() for p in leaf.params]

    def grads(self) -> list[np.ndarray]:
        return [g for leaf in self.leaves() for g in leaf.grads]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_weights(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_weights(self, weights: list[np.ndarray]) -> None:
        params = self.params()
        if len(params) != len(weights) or any(p.shape != w.shape for p, w in zip(params, weights)):
            raise ValueError("weight list does not match network parameters")
        for p, w in zip(params, weights):
            p[...] = w
