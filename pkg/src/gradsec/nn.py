"""Feed-forward network engine: dense, 2-D convolution and 2x2 max-pool layers.

Everything here works on ``numpy`` float32 arrays. Images are channels-last
``(m, h, w, c)``. Dense weights are ``(n_out, n_in)``, convolution kernels are
``(filters, k, k, in_channels)``. There are no bias terms, and softmax is fused
into the final dense layer so the output error is simply ``(Y_hat - Y) / m``.

Products are accumulated in float64 and cast back to float32.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DENSE = "dense"
CONV2D = "conv2d"
MAXPOOL2 = "maxpool2"
KINDS = (DENSE, CONV2D, MAXPOOL2)
ACTIVATIONS = ("identity", "sigmoid", "relu", "tanh")

CE_EPS = 1e-12
F32 = np.float32
F64 = np.float64


class ShapeError(ValueError):
    """Raised when tensors do not compose with a model's layer stack."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # neuron count, dense only
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.pad < 0:
            raise ValueError("stride must be >= 1 and pad >= 0")
        if self.kind == DENSE:
            if self.units < 1 or self.filters or self.kernel:
                raise ValueError("dense layer needs units >= 1 and no conv fields")
        elif self.kind == CONV2D:
            if self.filters < 1 or self.kernel < 1 or self.units:
                raise ValueError("conv2d layer needs filters >= 1 and kernel >= 1")
        if self.kind == MAXPOOL2:
            # pooling carries no weights and no activation
            object.__setattr__(self, "activation", "identity")
        elif self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def weighted(self) -> bool:
        return self.kind != MAXPOOL2


def dense(units: int, activation: str = "sigmoid") -> LayerSpec:
    return LayerSpec(DENSE, units=units, activation=activation)


def conv2d(filters: int, kernel: int, stride: int = 1, pad: int = 0,
           activation: str = "sigmoid") -> LayerSpec:
    return LayerSpec(CONV2D, filters=filters, kernel=kernel, stride=stride, pad=pad,
                     activation=activation)


def maxpool2() -> LayerSpec:
    return LayerSpec(MAXPOOL2, stride=2)


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-example output shape of ``spec`` applied to ``in_shape``."""
    if spec.kind == DENSE:
        return (spec.units,)
    if len(in_shape) != 3:
        raise ShapeError(f"{spec.kind} expects a (h, w, c) input, got {in_shape}")
    h, w, c = in_shape
    if spec.kind == CONV2D:
        oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {spec.kernel} larger than padded input {in_shape}")
        return (oh, ow, spec.filters)
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2 needs at least 2x2 input, got {in_shape}")
    return (h // 2, w // 2, c)


def weight_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...] | None:
    if spec.kind == DENSE:
        return (spec.units, int(np.prod(in_shape)))
    if spec.kind == CONV2D:
        return (spec.filters, spec.kernel, spec.kernel, in_shape[-1])
    return None


@dataclass(frozen=True)
class Model:
    """An ordered layer stack with its weights.

    Layer *blocks* group a weighted layer with the max-pool layers that follow
    it; block numbers (1-based) are the layer indices used for protection,
    matching how a "Conv2D + MP2" row counts as one layer.
    """

    input_shape: tuple[int, int, int]
    specs: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray | None, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "weights", tuple(self.weights))
        if not self.specs:
            raise ShapeError("model has no layers")
        if len(self.weights) != len(self.specs):
            raise ShapeError("one weight entry per layer is required")
        if not self.specs[0].weighted:
            raise ShapeError("first layer must carry weights", layer=0)
        if self.specs[-1].kind != DENSE:
            raise ShapeError("last layer must be dense", layer=len(self.specs) - 1)
        if self.specs[-1].activation != "identity":
            raise ShapeError("last dense layer feeds softmax; its activation must be identity",
                             layer=len(self.specs) - 1)
        shapes = [self.input_shape]
        for i, (spec, w) in enumerate(zip(self.specs, self.weights)):
            try:
                out = output_shape(spec, shapes[-1])
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}", layer=i) from None
            expect = weight_shape(spec, shapes[-1])
            if expect is None:
                if w is not None:
                    raise ShapeError(f"layer {i}: maxpool2 carries no weights", layer=i)
            elif w is None or tuple(w.shape) != expect:
                got = None if w is None else tuple(w.shape)
                raise ShapeError(f"layer {i}: weight shape {got}, expected {expect}", layer=i)
            shapes.append(out)
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def n(self) -> int:
        """Number of protectable layers (blocks)."""
        return len(self.blocks)

    @property
    def blocks(self) -> list[list[int]]:
        out: list[list[int]] = []
        for i, spec in enumerate(self.specs):
            if spec.weighted:
                out.append([i])
            else:
                out[-1].append(i)
        return out

    @property
    def weighted_index(self) -> list[int]:
        """Position in ``specs`` of the weighted layer of each block."""
        return [b[0] for b in self.blocks]

    @property
    def classes(self) -> int:
        return self.specs[-1].units

    def block_weights(self) -> list[np.ndarray]:
        return [self.weights[i] for i in self.weighted_index]

    def with_block_weights(self, ws: Sequence[np.ndarray]) -> "Model":
        if len(ws) != self.n:
            raise ShapeError(f"expected {self.n} weight tensors, got {len(ws)}")
        new = list(self.weights)
        for i, w in zip(self.weighted_index, ws):
            new[i] = np.asarray(w, dtype=F32)
        return Model(self.input_shape, self.specs, tuple(new))

    def param_counts(self) -> list[int]:
        return [int(w.size) for w in self.block_weights()]


def init_weights(specs: Sequence[LayerSpec], input_shape: tuple[int, int, int],
                 seed: int) -> list[np.ndarray | None]:
    """Uniform in +-sqrt(1/fan_in), drawn in layer order from ``seed``."""
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    ws: list[np.ndarray | None] = []
    for spec in specs:
        wshape = weight_shape(spec, shape)
        if wshape is None:
            ws.append(None)
        else:
            fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            ws.append(rng.uniform(-bound, bound, size=wshape).astype(F32))
        shape = output_shape(spec, shape)
    return ws


def build_model(specs: Sequence[LayerSpec], input_shape: tuple[int, int, int],
                seed: int) -> Model:
    return Model(tuple(input_shape), tuple(specs), tuple(init_weights(specs, input_shape, seed)))


# ---------------------------------------------------------------------------
# activations

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z.copy()
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(name)


def activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "sigmoid":
        s = _sigmoid(z)
        return s * (1 - s)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1 - np.tanh(z) ** 2
    raise ValueError(name)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(F64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(F32)


# ---------------------------------------------------------------------------
# convolution primitives (cross-correlation, channels-last)

def _pad_hw(x: np.ndarray, top: int, bottom: int | None = None) -> np.ndarray:
    bottom = top if bottom is None else bottom
    if top == 0 and bottom == 0:
        return x
    return np.pad(x, ((0, 0), (top, bottom), (top, bottom), (0, 0)))


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(m, oh, ow, c, k, k) view of the k x k patches of a padded input."""
    return sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def correlate(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of padded ``x`` (m,H,W,C) with ``w`` (F,k,k,C)."""
    win = _windows(x, w.shape[1], stride)
    out = np.tensordot(win.astype(F64), w.astype(F64), axes=([3, 4, 5], [3, 1, 2]))
    return out.astype(F32)


def conv_forward(a: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    return correlate(_pad_hw(a, pad), w, stride)


def conv_weight_grad(a: np.ndarray, delta: np.ndarray, k: int, stride: int,
                     pad: int) -> np.ndarray:
    win = _windows(_pad_hw(a, pad), k, stride)
    oh, ow = delta.shape[1:3]
    win = win[:, :oh, :ow]
    g = np.tensordot(delta.astype(F64), win.astype(F64), axes=([0, 1, 2], [0, 1, 2]))
    return g.transpose(0, 2, 3, 1).astype(F32)  # (F, C, k, k) -> (F, k, k, C)


def conv_input_grad(delta: np.ndarray, w: np.ndarray, in_hw: tuple[int, int],
                    stride: int, pad: int) -> np.ndarray:
    """Gradient w.r.t. the unpadded input of a strided, padded correlation.

    The error map is dilated by inserting ``stride - 1`` zeros between
    entries, padded by ``k - 1`` (plus the rows the forward window never
    reached), and fully correlated with the 180-degree rotated kernel.
    """
    m, oh, ow, f = delta.shape
    k = w.shape[1]
    h, wd = in_hw
    hp, wp = h + 2 * pad, wd + 2 * pad
    dil = np.zeros((m, (oh - 1) * stride + 1, (ow - 1) * stride + 1, f), dtype=delta.dtype)
    dil[:, ::stride, ::stride] = delta
    extra_h = hp - ((oh - 1) * stride + k)
    extra_w = wp - ((ow - 1) * stride + k)
    dil = np.pad(dil, ((0, 0), (k - 1, k - 1 + extra_h), (k - 1, k - 1 + extra_w), (0, 0)))
    w_rot = w[:, ::-1, ::-1, :].transpose(3, 1, 2, 0)  # (C, k, k, F)
    grad_padded = correlate(dil, w_rot, 1)
    return grad_padded[:, pad:pad + h, pad:pad + wd]


def maxpool_forward(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, h, w, c = a.shape
    h2, w2 = h // 2, w // 2
    win = a[:, :2 * h2, :2 * w2].reshape(m, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(m, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(grad_out: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    m, h2, w2, c = grad_out.shape
    win = np.zeros((m, h2, w2, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(m, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(m, 2 * h2, 2 * w2, c)
    out = np.zeros((m,) + tuple(in_shape), dtype=grad_out.dtype)
    out[:, :2 * h2, :2 * w2] = win
    return out


# ---------------------------------------------------------------------------
# forward / backward / update

@dataclass
class ForwardCache:
    Z: list  # per layer pre-activation; None for max-pool layers
    A: list  # A[0] = X, A[i + 1] = output of layer i, A[-1] = softmax output
    pool_argmax: dict = dataclasses.field(default_factory=dict)


@dataclass
class BackwardResult:
    dW: list  # per layer; None for max-pool layers
    delta: list  # dLoss/dZ per layer; None for max-pool layers
    loss: float
    dA: list  # dA[i] = dLoss/dA[i]; dA[0] only when requested


def _check_input(model: Model, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 4 or tuple(X.shape[1:]) != model.input_shape or X.shape[0] < 1:
        raise ShapeError(f"layer 0: input shape {X.shape} does not match (m,)+{model.input_shape}",
                         layer=0)
    return X.astype(F32, copy=False)


def forward(model: Model, X: np.ndarray) -> ForwardCache:
    A = [_check_input(model, X)]
    Z: list = []
    argmax = {}
    last = len(model.specs) - 1
    for i, (spec, w) in enumerate(zip(model.specs, model.weights)):
        a = A[-1]
        if spec.kind == MAXPOOL2:
            out, idx = maxpool_forward(a)
            argmax[i] = idx
            Z.append(None)
            A.append(out)
            continue
        if spec.kind == DENSE:
            flat = a.reshape(a.shape[0], -1)
            z = (flat.astype(F64) @ w.astype(F64).T).astype(F32)
        else:
            z = conv_forward(a, w, spec.stride, spec.pad)
        Z.append(z)
        A.append(softmax(z) if i == last else activate(spec.activation, z))
    return ForwardCache(Z=Z, A=A, pool_argmax=argmax)


def loss_ce(y_hat: np.ndarray, Y: np.ndarray) -> float:
    """Mean categorical cross-entropy ``-sum(Y * ln(Y_hat + eps))``."""
    y_hat = np.asarray(y_hat, dtype=F64)
    Y = np.asarray(Y, dtype=F64)
    if y_hat.shape != Y.shape or y_hat.ndim != 2:
        raise ShapeError(f"prediction shape {y_hat.shape} does not match labels {Y.shape}")
    if np.any(np.abs(y_hat.sum(axis=1) - 1.0) > 1e-4) or np.any(y_hat < 0):
        raise ValueError("predictions are not probability vectors")
    return float(np.mean(-np.sum(Y * np.log(y_hat + CE_EPS), axis=1)))


def backward(model: Model, cache: ForwardCache, Y: np.ndarray,
             input_grad: bool = False) -> BackwardResult:
    L = len(model.specs)
    if len(cache.Z) != L or len(cache.A) != L + 1:
        raise ShapeError("forward cache does not belong to this model")
    y_hat = cache.A[-1]
    Y = np.asarray(Y, dtype=F32)
    if Y.shape != y_hat.shape:
        raise ShapeError(f"labels shape {Y.shape} does not match predictions {y_hat.shape}")
    m = Y.shape[0]
    dW: list = [None] * L
    delta: list = [None] * L
    dA: list = [None] * (L + 1)
    grad_z = (y_hat - Y) / F32(m)
    for i in range(L - 1, -1, -1):
        spec, w = model.specs[i], model.weights[i]
        a_in = cache.A[i]
        if i != L - 1:
            if spec.kind == MAXPOOL2:
                g = maxpool_backward(dA[i + 1], cache.pool_argmax[i], a_in.shape[1:])
                if i > 0 or input_grad:
                    dA[i] = g
                continue
            grad_z = (dA[i + 1] * activate_grad(spec.activation, cache.Z[i])).astype(F32)
        delta[i] = grad_z
        need_input = i > 0 or input_grad
        if spec.kind == DENSE:
            flat = a_in.reshape(m, -1)
            dW[i] = (grad_z.astype(F64).T @ flat.astype(F64)).astype(F32)
            if need_input:
                dA[i] = (grad_z.astype(F64) @ w.astype(F64)).astype(F32).reshape(a_in.shape)
        else:
            dW[i] = conv_weight_grad(a_in, grad_z, spec.kernel, spec.stride, spec.pad)
            if need_input:
                dA[i] = conv_input_grad(grad_z, w, a_in.shape[1:3], spec.stride, spec.pad)
    return BackwardResult(dW=dW, delta=delta, loss=loss_ce(y_hat, Y), dA=dA)


def gradients(model: Model, X: np.ndarray, Y: np.ndarray) -> tuple[ForwardCache, BackwardResult]:
    cache = forward(model, X)
    return cache, backward(model, cache, Y)


def sgd_step(model: Model, grads: BackwardResult | Sequence, lr: float) -> Model:
    """``W <- W - lr * dW`` for every weighted layer; ``model`` is left untouched."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    dW = grads.dW if isinstance(grads, BackwardResult) else list(grads)
    if len(dW) != len(model.specs):
        raise ShapeError("gradient list does not match the model's layers")
    new = []
    for i, (w, g) in enumerate(zip(model.weights, dW)):
        if w is None:
            new.append(None)
            continue
        if g is None or g.shape != w.shape:
            raise ShapeError(f"layer {i}: gradient shape mismatch", layer=i)
        new.append((w - F32(lr) * g).astype(F32))
    return Model(model.input_shape, model.specs, tuple(new))


def predict(model: Model, X: np.ndarray, batch: int = 256) -> np.ndarray:
    outs = [forward(model, X[i:i + batch]).A[-1] for i in range(0, len(X), batch)]
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# architectures

def lenet5_specs(classes: int = 100, activation: str = "sigmoid") -> list[LayerSpec]:
    """4 conv (12 filters, 5x5) + 1 dense; every conv is padded by 2."""
    return [
        conv2d(12, 5, stride=2, pad=2, activation=activation),
        conv2d(12, 5, stride=2, pad=2, activation=activation),
        conv2d(12, 5, stride=1, pad=2, activation=activation),
        conv2d(12, 5, stride=1, pad=2, activation=activation),
        dense(classes, activation="identity"),
    ]


def alexnet_specs(classes: int = 100, activation: str = "sigmoid") -> list[LayerSpec]:
    return [
        conv2d(64, 3, stride=2, pad=1, activation=activation), maxpool2(),
        conv2d(192, 3, stride=1, pad=1, activation=activation), maxpool2(),
        conv2d(384, 3, stride=1, pad=1, activation=activation),
        conv2d(256, 3, stride=1, pad=1, activation=activation),
        conv2d(256, 3, stride=1, pad=1, activation=activation), maxpool2(),
        dense(4096, activation=activation),
        dense(4096, activation=activation),
        dense(classes, activation="identity"),
    ]


def tiny_specs(classes: int = 4, activation: str = "sigmoid") -> list[LayerSpec]:
    return [
        conv2d(4, 3, stride=1, pad=1, activation=activation),
        conv2d(4, 3, stride=1, pad=1, activation=activation),
        dense(classes, activation="identity"),
    ]


ARCHITECTURES = {
    "lenet5": (lenet5_specs, (32, 32, 3)),
    "alexnet": (alexnet_specs, (32, 32, 3)),
    "tiny": (tiny_specs, (8, 8, 1)),
}


def architecture(name: str, classes: int | None = None, activation: str = "sigmoid",
                 input_shape: tuple[int, int, int] | None = None):
    """``(specs, input_shape)`` for a named architecture."""
    try:
        fn, default_shape = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    kwargs = {"activation": activation}
    if classes is not None:
        kwargs["classes"] = classes
    return fn(**kwargs), tuple(input_shape or default_shape)
