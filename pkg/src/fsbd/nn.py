"""Minimal convolutional classifier engine.

Forward inference, NLL loss, three hand-derived gradient flavors (loss w.r.t.
parameters, loss w.r.t. input, log-probability output w.r.t. parameters) and a
plain SGD step. No autodiff graph: each layer type has an explicit backward
rule. Parameters live in a flat ParamVector so aggregation, masking and
injection can treat the model as one array.

Everything is a pure function of its inputs; models are never mutated in
place. Default storage is float32 with an optional float64 shadow (via
``Model.astype``) for gradient verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import InputError, LayoutMismatchError

# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class LogSoftmax:
    pass


Layer = Union[Conv, Dense, Relu, MaxPool, Flatten, LogSoftmax]


@dataclass(frozen=True)
class ModelTopology:
    """Ordered layer descriptors plus input shape (channels, height, width) and class count."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    classes: int

    def __post_init__(self):
        shape = self._validate()
        object.__setattr__(self, "_output_shape", shape)

    def _validate(self):
        if not self.layers or not isinstance(self.layers[-1], LogSoftmax):
            raise InputError("topology must end with a single LogSoftmax layer")
        if sum(isinstance(l, LogSoftmax) for l in self.layers) != 1:
            raise InputError("topology must contain exactly one LogSoftmax layer")
        shape: tuple[int, ...] = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise InputError(f"layer {i}: Conv expects {layer.in_channels} channels, got shape {shape}")
                h, w = shape[1] - layer.kernel + 1, shape[2] - layer.kernel + 1
                if h < 1 or w < 1:
                    raise InputError(f"layer {i}: kernel {layer.kernel} too large for input {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise InputError(f"layer {i}: MaxPool needs spatial input, got {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise InputError(f"layer {i}: Dense expects {layer.in_features} features, got shape {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, LogSoftmax):
                if shape != (self.classes,):
                    raise InputError(f"final layer feeds {shape}, expected ({self.classes},)")
        return shape

    def parameterized_layers(self) -> list[int]:
        """Indices of layers that carry parameters (Conv and Dense)."""
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv, Dense))]

    def make_layout(self) -> tuple["ParamSlot", ...]:
        slots = []
        offset = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                shapes = [("weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)),
                          ("bias", (layer.out_channels,))]
            elif isinstance(layer, Dense):
                shapes = [("weight", (layer.in_features, layer.out_features)),
                          ("bias", (layer.out_features,))]
            else:
                continue
            for name, shape in shapes:
                slots.append(ParamSlot(i, name, offset, shape))
                offset += int(np.prod(shape))
        return tuple(slots)


def small_cnn(input_shape: tuple[int, int, int] = (1, 28, 28), classes: int = 10) -> ModelTopology:
    """Desk-scale topology: two conv/pool blocks, two dense layers, ~28k parameters."""
    c, h, w = input_shape
    h1, w1 = (h - 2) // 2, (w - 2) // 2
    h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
    return ModelTopology(
        layers=(
            Conv(c, 8, 3), Relu(), MaxPool(2),
            Conv(8, 16, 3), Relu(), MaxPool(2),
            Flatten(),
            Dense(16 * h2 * w2, 64), Relu(),
            Dense(64, classes),
            LogSoftmax(),
        ),
        input_shape=input_shape,
        classes=classes,
    )


# ---------------------------------------------------------------- parameters


@dataclass(frozen=True)
class ParamSlot:
    """One parameter tensor's location inside the flat vector."""

    layer: int
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))


class ParamVector:
    """Flat array of all model parameters plus the per-tensor layout index.

    Element i addresses the same parameter in every vector built from the same
    topology, which is what makes masks, variances and deltas meaningful.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: tuple[ParamSlot, ...]):
        values = np.ascontiguousarray(values)
        if values.ndim != 1:
            raise InputError("ParamVector values must be one-dimensional")
        total = sum(s.length for s in layout)
        if values.size != total:
            raise InputError(f"values length {values.size} != layout total {total}")
        self.values = values
        self.layout = layout

    @property
    def size(self) -> int:
        return self.values.size

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def require_same_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise LayoutMismatchError("parameter vectors have different layouts")

    def view(self, slot: ParamSlot) -> np.ndarray:
        return self.values[slot.offset:slot.offset + slot.length].reshape(slot.shape)

    def layer_slice(self, layer: int) -> slice:
        """Contiguous slice covering every parameter of one topology layer."""
        slots = [s for s in self.layout if s.layer == layer]
        if not slots:
            raise InputError(f"layer {layer} has no parameters")
        return slice(slots[0].offset, slots[-1].offset + slots[-1].length)

    def unflatten(self) -> list[np.ndarray]:
        return [self.view(s).copy() for s in self.layout]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.values.astype(dtype), self.layout)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.require_same_layout(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.require_same_layout(other)
        return ParamVector(self.values - other.values, self.layout)

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector(self.values * np.asarray(factor, dtype=self.values.dtype), self.layout)


def flatten_arrays(arrays: list[np.ndarray], layout: tuple[ParamSlot, ...]) -> ParamVector:
    """Inverse of ParamVector.unflatten (bitwise round trip)."""
    if len(arrays) != len(layout):
        raise InputError("array count does not match layout")
    flat = np.concatenate([np.asarray(a).reshape(-1) for a in arrays])
    return ParamVector(flat, layout)


@dataclass(frozen=True)
class Model:
    topology: ModelTopology
    params: ParamVector

    def __post_init__(self):
        if self.params.layout != self.topology.make_layout():
            raise LayoutMismatchError("parameter layout does not match topology")

    @property
    def dtype(self):
        return self.params.values.dtype

    def with_params(self, params: ParamVector) -> "Model":
        return Model(self.topology, params)

    def astype(self, dtype) -> "Model":
        return Model(self.topology, self.params.astype(dtype))


def init_params(topology: ModelTopology, seed: int, dtype=np.float32) -> ParamVector:
    """Glorot-uniform weights, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    layout = topology.make_layout()
    values = np.zeros(sum(s.length for s in layout), dtype=dtype)
    vec = ParamVector(values, layout)
    for slot in layout:
        if slot.name != "weight":
            continue
        layer = topology.layers[slot.layer]
        if isinstance(layer, Conv):
            fan_in = layer.in_channels * layer.kernel ** 2
            fan_out = layer.out_channels * layer.kernel ** 2
        else:
            fan_in, fan_out = layer.in_features, layer.out_features
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        vec.view(slot)[...] = rng.uniform(-bound, bound, slot.shape).astype(dtype)
    return vec


def init_model(topology: ModelTopology, seed: int, dtype=np.float32) -> Model:
    return Model(topology, init_params(topology, seed, dtype))


# ---------------------------------------------------------------- forward


def _as_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=model.dtype)
    expect = model.topology.input_shape
    if batch.shape == expect:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1:] != expect:
        raise InputError(f"batch shape {batch.shape} does not match input shape {expect}")
    return batch


def _im2col(x, k):
    """[B, C, H, W] -> ([B*Hp*Wp, C*k*k] patch matrix, Hp, Wp)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    b, c, hp, wp = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * hp * wp, c * k * k)
    return cols, hp, wp


def _conv_forward(x, w, b, cols=None):
    o, c, k, _ = w.shape
    if cols is None:
        cols, hp, wp = _im2col(x, k)
    else:
        hp, wp = x.shape[2] - k + 1, x.shape[3] - k + 1
    z = cols @ w.reshape(o, c * k * k).T + b
    return z.reshape(x.shape[0], hp, wp, o).transpose(0, 3, 1, 2)


def _conv_backward(x_shape, cols, w, dz, want_dx=True):
    o, c, k, _ = w.shape
    b, _, hp, wp = dz.shape
    dzc = np.ascontiguousarray(dz.transpose(0, 2, 3, 1)).reshape(-1, o)
    dw = (dzc.T @ cols).reshape(o, c, k, k)
    db = dzc.sum(axis=0)
    if not want_dx:
        return dw, db, None
    # dx as k*k shifted rank updates: dx[:, :, h+i, w+j] += dz[:, o, h, w] * w[o, :, i, j]
    dx_cl = np.zeros((b, x_shape[2], x_shape[3], c), dtype=dz.dtype)
    wmat = w.reshape(o, c, k * k)
    for i in range(k):
        for j in range(k):
            contrib = (dzc @ wmat[:, :, i * k + j]).reshape(b, hp, wp, c)
            dx_cl[:, i:i + hp, j:j + wp, :] += contrib
    return dw, db, np.ascontiguousarray(dx_cl.transpose(0, 3, 1, 2))


def _pool_forward(x, size):
    b, c, h, w = x.shape
    hp, wp = h // size, w // size
    xt = x[:, :, :hp * size, :wp * size].reshape(b, c, hp, size, wp, size)
    win = xt.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp, wp, size * size)
    idx = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(x_shape, idx, dz, size, dtype):
    b, c, h, w = x_shape
    hp, wp = h // size, w // size
    dwin = np.zeros((b, c, hp, wp, size * size), dtype=dtype)
    np.put_along_axis(dwin, idx[..., None], dz[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dtype)
    dx[:, :, :hp * size, :wp * size] = (
        dwin.reshape(b, c, hp, wp, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hp * size, wp * size)
    )
    return dx


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _forward_cached(model: Model, x: np.ndarray):
    """Run the network, recording per-layer inputs (and pool argmaxes) for backward."""
    caches = []
    a = x
    for i, layer in enumerate(model.topology.layers):
        if isinstance(layer, Conv):
            w = model.params.view(_slot(model, i, "weight"))
            b = model.params.view(_slot(model, i, "bias"))
            cols, _, _ = _im2col(a, layer.kernel)
            caches.append((a.shape, cols))
            a = _conv_forward(a, w, b, cols=cols)
        elif isinstance(layer, Dense):
            w = model.params.view(_slot(model, i, "weight"))
            b = model.params.view(_slot(model, i, "bias"))
            caches.append(a)
            a = a @ w + b
        elif isinstance(layer, Relu):
            caches.append(a)
            a = np.maximum(a, 0)
        elif isinstance(layer, MaxPool):
            out, idx = _pool_forward(a, layer.size)
            caches.append((a.shape, idx))
            a = out
        elif isinstance(layer, Flatten):
            caches.append(a.shape)
            a = a.reshape(a.shape[0], -1)
        elif isinstance(layer, LogSoftmax):
            caches.append(None)
            a = _log_softmax(a)
    return a, caches


def _slot(model: Model, layer: int, name: str) -> ParamSlot:
    for s in model.params.layout:
        if s.layer == layer and s.name == name:
            return s
    raise InputError(f"no {name} slot for layer {layer}")


def _backward(model: Model, log_probs: np.ndarray, caches, d_logprobs: np.ndarray,
              want_input_grad: bool = True):
    """Propagate d(scalar)/d(log_probs) back to all parameters and, optionally, the input.

    Returns (flat parameter gradient, input gradient or None). Skipping the
    input gradient lets the first convolution avoid its (expensive, unused)
    data-gradient pass during training.
    """
    grad = np.zeros(model.params.size, dtype=model.dtype)
    gvec = ParamVector(grad, model.params.layout)
    d = d_logprobs
    for i in range(len(model.topology.layers) - 1, -1, -1):
        layer = model.topology.layers[i]
        cache = caches[i]
        if isinstance(layer, LogSoftmax):
            # d_z = d - softmax(z) * sum(d); softmax(z) == exp(log_probs)
            p = np.exp(log_probs)
            d = d - p * d.sum(axis=1, keepdims=True)
        elif isinstance(layer, Dense):
            x = cache
            gvec.view(_slot(model, i, "weight"))[...] = x.T @ d
            gvec.view(_slot(model, i, "bias"))[...] = d.sum(axis=0)
            d = d @ model.params.view(_slot(model, i, "weight")).T
        elif isinstance(layer, Relu):
            d = d * (cache > 0)
        elif isinstance(layer, MaxPool):
            x_shape, idx = cache
            d = _pool_backward(x_shape, idx, d, layer.size, model.dtype)
        elif isinstance(layer, Flatten):
            d = d.reshape(cache)
        elif isinstance(layer, Conv):
            x_shape, cols = cache
            want_dx = want_input_grad or i > 0
            dw, db, d = _conv_backward(x_shape, cols, model.params.view(_slot(model, i, "weight")),
                                       d, want_dx=want_dx)
            gvec.view(_slot(model, i, "weight"))[...] = dw
            gvec.view(_slot(model, i, "bias"))[...] = db
            if d is None:
                break
    return gvec, d


# ---------------------------------------------------------------- public ops


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Log-probabilities, shape [batch, classes]."""
    x = _as_batch(model, batch)
    out, _ = _forward_cached(model, x)
    return out


def predict(model: Model, batch: np.ndarray) -> np.ndarray:
    return forward(model, batch).argmax(axis=1)


def forward_activations(model: Model, batch: np.ndarray) -> list[np.ndarray]:
    """Post-activation matrices [batch, units] after each Relu and the final LogSoftmax."""
    x = _as_batch(model, batch)
    out = []
    a = x
    for i, layer in enumerate(model.topology.layers):
        if isinstance(layer, Conv):
            a = _conv_forward(a, model.params.view(_slot(model, i, "weight")),
                              model.params.view(_slot(model, i, "bias")))
        elif isinstance(layer, Dense):
            a = a @ model.params.view(_slot(model, i, "weight")) + model.params.view(_slot(model, i, "bias"))
        elif isinstance(layer, Relu):
            a = np.maximum(a, 0)
            out.append(a.reshape(a.shape[0], -1))
        elif isinstance(layer, MaxPool):
            a, _ = _pool_forward(a, layer.size)
        elif isinstance(layer, Flatten):
            a = a.reshape(a.shape[0], -1)
        elif isinstance(layer, LogSoftmax):
            a = _log_softmax(a)
            out.append(a)
    return out


def nll_loss(log_probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of the true labels."""
    log_probs = np.asarray(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.ndim != 2 or log_probs.shape[0] != labels.shape[0]:
        raise InputError("log_probs rows must match label count")
    if labels.size and (labels.min() < 0 or labels.max() >= log_probs.shape[1]):
        raise InputError("label out of range")
    picked = log_probs[np.arange(labels.size), labels]
    return float(-picked.mean())


def grad_loss_params(model: Model, batch: np.ndarray, labels) -> ParamVector:
    """Gradient of the mean NLL loss over the batch with respect to all parameters."""
    x = _as_batch(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise InputError("labels must be one per batch row")
    if labels.size and (labels.min() < 0 or labels.max() >= model.topology.classes):
        raise InputError("label out of range")
    log_probs, caches = _forward_cached(model, x)
    d = np.zeros_like(log_probs)
    d[np.arange(labels.size), labels] = -1.0 / labels.size
    gvec, _ = _backward(model, log_probs, caches, d, want_input_grad=False)
    return gvec


def grad_loss_input(model: Model, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of the NLL loss at label y with respect to a single input."""
    x = np.asarray(x, dtype=model.dtype)
    if x.shape != model.topology.input_shape:
        raise InputError(f"expected a single input of shape {model.topology.input_shape}")
    if not 0 <= int(y) < model.topology.classes:
        raise InputError("label out of range")
    xb = x[None]
    log_probs, caches = _forward_cached(model, xb)
    d = np.zeros_like(log_probs)
    d[0, int(y)] = -1.0
    _, dx = _backward(model, log_probs, caches, d)
    return dx[0]


def grad_logprob_params(model: Model, batch: np.ndarray, labels) -> ParamVector:
    """Gradient of mean_i log_prob(x_i)[y_i] with respect to all parameters.

    This is the pre-loss output component used for parameter-importance
    scoring; with a single example it is the per-layer output gradient.
    """
    x = _as_batch(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise InputError("labels must be one per batch row")
    log_probs, caches = _forward_cached(model, x)
    d = np.zeros_like(log_probs)
    d[np.arange(labels.size), labels] = 1.0 / labels.size
    gvec, _ = _backward(model, log_probs, caches, d, want_input_grad=False)
    return gvec


def grad_logit_params(model: Model, x: np.ndarray, y: int, layer: int):
    """Gradient of the class-y log-probability output w.r.t. one layer's parameters.

    Returns (d_weight, d_bias) shaped like that layer's tensors.
    """
    if layer not in model.topology.parameterized_layers():
        raise InputError(f"layer {layer} is not a parameterized layer")
    x = np.asarray(x, dtype=model.dtype)
    if x.shape != model.topology.input_shape:
        raise InputError(f"expected a single input of shape {model.topology.input_shape}")
    gvec = grad_logprob_params(model, x[None], [int(y)])
    dw = gvec.view(_slot(model, layer, "weight")).copy()
    db = gvec.view(_slot(model, layer, "bias")).copy()
    return dw, db


def sgd_step(model: Model, grad: ParamVector, lr: float) -> Model:
    """params' = params - lr * grad."""
    if lr <= 0:
        raise InputError("learning rate must be positive")
    model.params.require_same_layout(grad)
    lr = np.asarray(lr, dtype=model.dtype)
    return model.with_params(ParamVector(model.params.values - lr * grad.values, model.params.layout))
