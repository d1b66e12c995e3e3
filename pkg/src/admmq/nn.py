"""A small deterministic float64 network substrate.

Layers are stateless with respect to a forward/backward pass: ``forward``
returns ``(output, cache)`` and ``backward`` consumes that cache, so the
same model can be evaluated from several threads.  Parameters live on the
layer objects as plain ``np.ndarray`` attributes and are exposed by
``Model.parameters()`` under dotted names such as ``"conv1.weight"``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import _kernels
from .errors import DivergenceError, ShapeError

# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def __init__(self, name=None):
        self.name = name

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, rng):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx=True):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    @property
    def weight_bearing(self) -> bool:
        return bool(self.param_names)

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, name=None):
        super().__init__(name)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = np.zeros((self.out_features, self.in_features))
        self.bias = np.zeros(self.out_features)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(
                f"layer {self.name!r} (dense) expects input ({self.in_features},), got {tuple(in_shape)}"
            )
        return (self.out_features,)

    def init_params(self, rng):
        bound = math.sqrt(6.0 / self.in_features)
        self.weight = rng.uniform(-bound, bound, size=self.weight.shape)
        self.bias = np.zeros(self.out_features)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, cache, need_dx=True):
        x = cache
        grads = {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
        return (dy @ self.weight if need_dx else None), grads

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


class Conv2D(Layer):
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, name=None):
        super().__init__(name)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        k = self.kernel_size
        self.weight = np.zeros((self.out_channels, self.in_channels, k, k))
        self.bias = np.zeros(self.out_channels)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(
                f"layer {self.name!r} (conv2d) expects ({self.in_channels}, H, W) input, got {tuple(in_shape)}"
            )
        _, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {self.name!r} (conv2d): kernel {k} larger than padded input {h}x{w}")
        return (self.out_channels, oh, ow)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel_size**2
        bound = math.sqrt(6.0 / fan_in)
        self.weight = rng.uniform(-bound, bound, size=self.weight.shape)
        self.bias = np.zeros(self.out_channels)

    def forward(self, x):
        b = x.shape[0]
        k, s, p = self.kernel_size, self.stride, self.padding
        _, oh, ow = self.output_shape(x.shape[1:])
        cols = _kernels.im2col(x, k, k, s, p)
        w2 = self.weight.reshape(self.out_channels, -1)
        y = (cols @ w2.T + self.bias).reshape(b, oh, ow, self.out_channels)
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (x.shape, cols)

    def backward(self, dy, cache, need_dx=True):
        x_shape, cols = cache
        k = self.kernel_size
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w2 = self.weight.reshape(self.out_channels, -1)
        grads = {"weight": (dy2.T @ cols).reshape(self.weight.shape), "bias": dy2.sum(axis=0)}
        if not need_dx:
            return None, grads
        dx = _kernels.col2im(dy2 @ w2, x_shape, k, k, self.stride, self.padding)
        return dx, grads

    def spec(self):
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel_size=2, stride=None, name=None):
        super().__init__(name)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride) if stride is not None else self.kernel_size

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {self.name!r} (maxpool2d) expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        k, s = self.kernel_size, self.stride
        if h < k or w < k:
            raise ShapeError(f"layer {self.name!r} (maxpool2d): window {k} larger than input {h}x{w}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x):
        out, arg = _kernels.maxpool_forward(x, self.kernel_size, self.stride)
        return out, (x.shape, arg)

    def backward(self, dy, cache, need_dx=True):
        x_shape, arg = cache
        return _kernels.maxpool_backward(dy, arg, x_shape, self.kernel_size, self.stride), {}

    def spec(self):
        return {"kind": self.kind, "kernel_size": self.kernel_size, "stride": self.stride}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, cache, need_dx=True):
        return np.where(cache, dy, 0.0), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True):
        return dy.reshape(cache), {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, MaxPool2D, ReLU, Flatten)}


def build_layer(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ShapeError(f"unknown layer kind {kind!r}") from None
    return cls(**spec)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    """Ordered layer stack with a fixed input shape and class count."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        counts: dict[str, int] = {}
        for layer in self.layers:
            if layer.name is None and layer.weight_bearing:
                counts[layer.kind] = counts.get(layer.kind, 0) + 1
                stem = "conv" if layer.kind == "conv2d" else layer.kind
                layer.name = f"{stem}{counts[layer.kind]}"
        names = [l.name for l in self.layers if l.weight_bearing]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate layer names: {names}")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"model output must be flat logits, got shape {shape}")
        self.num_classes = shape[0]

    @property
    def N(self) -> int:
        return sum(1 for layer in self.layers if layer.weight_bearing)

    def weight_layers(self):
        return [layer for layer in self.layers if layer.weight_bearing]

    def weight_names(self) -> list[str]:
        """Names of the quantizable tensors, one per weight-bearing layer."""
        return [f"{layer.name}.weight" for layer in self.weight_layers()]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.weight_layers():
            for p in layer.param_names:
                out[f"{layer.name}.{p}"] = getattr(layer, p)
        return out

    def get(self, name: str) -> np.ndarray:
        lname, pname = name.rsplit(".", 1)
        return getattr(self._layer(lname), pname)

    def set(self, name: str, value) -> None:
        lname, pname = name.rsplit(".", 1)
        layer = self._layer(lname)
        current = getattr(layer, pname)
        value = np.array(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeError(f"{name}: expected shape {current.shape}, got {value.shape}")
        current[...] = value

    def _layer(self, lname):
        for layer in self.layers:
            if layer.name == lname:
                return layer
        raise KeyError(lname)

    def init_params(self, seed) -> "Model":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)
        return self

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def architecture(self) -> dict:
        layers = []
        for layer in self.layers:
            spec = layer.spec()
            if layer.name is not None:
                spec["name"] = layer.name
            layers.append(spec)
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_architecture(cls, arch: dict) -> "Model":
        return cls([build_layer(s) for s in arch["layers"]], arch["input_shape"])

    def forward(self, x, keep_caches=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            first = self.layers[0].name or self.layers[0].kind
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match model input {self.input_shape} (layer {first!r})"
            )
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            if keep_caches:
                caches.append(cache)
        return (x, caches) if keep_caches else x

    __call__ = forward

    def loss_and_grad(self, inputs, labels):
        logits, caches = self.forward(inputs, keep_caches=True)
        value, dy = softmax_cross_entropy(logits, labels)
        grads = {}
        first = next(i for i, l in enumerate(self.layers) if l.weight_bearing)
        for i in range(len(self.layers) - 1, first - 1, -1):
            layer = self.layers[i]
            dy, g = layer.backward(dy, caches[i], need_dx=i > first)
            for p, v in g.items():
                grads[f"{layer.name}.{p}"] = v
        return value, dict(reversed(grads.items()))

    def loss(self, inputs, labels) -> float:
        return softmax_cross_entropy(self.forward(inputs), labels)[0]

    def input_grad(self, inputs, labels):
        """Gradient of the mean loss with respect to the inputs."""
        logits, caches = self.forward(inputs, keep_caches=True)
        _, dy = softmax_cross_entropy(logits, labels)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, _ = layer.backward(dy, cache)
        return dy

    def __repr__(self):
        body = ",\n  ".join(repr(l) for l in self.layers)
        return f"Model(input_shape={self.input_shape}, layers=[\n  {body}\n])"


def lenet5(seed=0, num_classes=10) -> Model:
    """conv 6@5x5 -> pool 2 -> conv 16@5x5 -> pool 2 -> 120 -> 84 -> num_classes."""
    layers = [
        Conv2D(1, 6, 5),
        ReLU(),
        MaxPool2D(2),
        Conv2D(6, 16, 5),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
        Dense(256, 120),
        ReLU(),
        Dense(120, 84),
        ReLU(),
        Dense(84, num_classes),
    ]
    return Model(layers, (1, 28, 28)).init_params(seed)


def mlp(in_features, hidden=(), num_classes=2, seed=0) -> Model:
    sizes = [in_features, *hidden, num_classes]
    layers: list[Layer] = []
    for i in range(len(sizes) - 1):
        layers.append(Dense(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Model(layers, (in_features,)).init_params(seed)


# ---------------------------------------------------------------------------
# loss, gradients, evaluation
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ShapeError(f"batch has {len(self.inputs)} inputs but {len(self.labels)} labels")


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"label index out of range [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sumexp = ez.sum(axis=1)
    rows = np.arange(b)
    value = float(np.mean(np.log(sumexp) - z[rows, labels]))
    d = ez / sumexp[:, None]
    d[rows, labels] -= 1.0
    return max(value, 0.0), d / b


def forward(model: Model, inputs) -> np.ndarray:
    return model.forward(inputs)


def loss(logits, labels) -> float:
    return softmax_cross_entropy(logits, labels)[0]


def backward(model: Model, batch: Batch) -> dict[str, np.ndarray]:
    return model.loss_and_grad(batch.inputs, batch.labels)[1]


def predict(model: Model, inputs, batch_size=1000) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    out = []
    for start in range(0, len(inputs), batch_size):
        out.append(np.argmax(model.forward(inputs[start : start + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, dataset, batch_size=1000) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.images, batch_size) == dataset.labels))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Update ``params`` in place (the arrays referenced by the model)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r} at optimizer step {state.t + 1}")
    state.t += 1
    if state.algorithm == "sgd":
        for name, g in grads.items():
            params[name] -= state.lr * g
        return
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def iterate_minibatches(dataset, batch_size, rng) -> Iterator[Batch]:
    n = len(dataset.labels)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx])


GradFn = Callable[[Batch], "tuple[float, dict[str, np.ndarray]]"]


def train_epoch(model, dataset, opt: OptimizerState, batch_size, rng, grad_fn: GradFn | None = None) -> float:
    """One pass over ``dataset`` in seeded random order; returns mean batch loss."""
    if grad_fn is None:
        grad_fn = lambda batch: model.loss_and_grad(batch.inputs, batch.labels)  # noqa: E731
    params = model.parameters()
    total, count = 0.0, 0
    for batch in iterate_minibatches(dataset, batch_size, rng):
        value, grads = grad_fn(batch)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} after {opt.t} optimizer steps")
        optimizer_step(params, grads, opt)
        total += value
        count += 1
    return total / max(count, 1)
