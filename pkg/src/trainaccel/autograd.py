"""Reverse-mode differentiation over a small fixed layer zoo.

A :class:`ComputeGraph` is an ordered stack of layers ending in a
softmax cross-entropy loss. :func:`forward` records the activations each
layer needs, and :func:`backward` replays them in reverse to produce
gradients of the mean batch loss for every parameter.

Ops elected to half precision (``matmul`` for Linear, ``conv`` for
Conv2d) snap their operands and results onto the binary16 grid in both
passes; everything else, including the loss, stays in float32.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .amp import FULL_SINGLE, PrecisionPolicy
from .errors import ContractViolation
from .tensor import Rng

_graph_ids = itertools.count()


@dataclass
class Parameter:
    """Master (float32) copy of one weight tensor."""

    id: str
    master: np.ndarray
    grad: np.ndarray | None = None
    version: int = 0

    def __post_init__(self):
        self.master = np.asarray(self.master, dtype=np.float32)

    def assign(self, value):
        value = np.asarray(value, dtype=np.float32)
        if value.shape != self.master.shape:
            raise ContractViolation(f"{self.id}: shape {value.shape} != {self.master.shape}")
        self.master = value
        self.version += 1


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractViolation(
                f"batch has {self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass
class _Ctx:
    policy: PrecisionPolicy
    dtype: type
    overrides: dict | None = None

    def value(self, p: Parameter):
        v = self.overrides.get(p.id) if self.overrides else None
        if v is None:
            v = p.master
        return v.astype(self.dtype, copy=False)

    def snap(self, a, kind):
        if self.policy.elects_half(kind):
            return kernels.round_half(a).astype(self.dtype, copy=False)
        return a


class Layer:
    kind = "layer"

    def params(self) -> list[Parameter]:
        return []

    def output_shape(self, in_shape):
        return in_shape

    def flops(self, in_shape) -> int:
        return 0


class Linear(Layer):
    kind = "matmul"

    def __init__(self, in_features, out_features, rng: Rng | None = None):
        self.in_features = in_features
        self.out_features = out_features
        bound = math.sqrt(6.0 / in_features)
        rng = rng or Rng(0)
        self.weight = Parameter("weight", rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter("bias", np.zeros(out_features))

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ContractViolation(f"Linear expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def flops(self, in_shape):
        return 2 * self.in_features * self.out_features

    def forward(self, x, ctx):
        xh = ctx.snap(x, "matmul")
        wh = ctx.snap(ctx.value(self.weight), "matmul")
        y = ctx.snap(kernels.matmul(xh, np.ascontiguousarray(wh.T)), "matmul")
        return y + ctx.value(self.bias), (xh, wh)

    def backward(self, dy, saved, ctx):
        xh, wh = saved
        dyh = ctx.snap(dy, "matmul")
        dw = ctx.snap(kernels.matmul(np.ascontiguousarray(dyh.T), xh), "matmul")
        db = dy.sum(axis=0)
        dx = ctx.snap(kernels.matmul(dyh, wh), "matmul")
        return dx, {self.weight.id: dw, self.bias.id: db}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        mask = ~(x <= 0)  # NaN stays in the "pass" set so overflow is never masked
        return np.where(mask, x, x.dtype.type(0)), mask

    def backward(self, dy, mask, ctx):
        return np.where(mask, dy, dy.dtype.type(0)), {}


class Flatten(Layer):
    kind = "reshape"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, ctx):
        return dy.reshape(shape), {}


class Conv2d(Layer):
    """Small 2-D convolution (square kernel) lowered to im2col + matmul."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 rng: Rng | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        bound = math.sqrt(6.0 / fan_in)
        rng = rng or Rng(0)
        self.weight = Parameter(
            "weight", rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter("bias", np.zeros(out_channels))

    def params(self):
        return [self.weight, self.bias]

    def _out_hw(self, h, w):
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ContractViolation(f"Conv2d expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        ho, wo = self._out_hw(in_shape[1], in_shape[2])
        if ho < 1 or wo < 1:
            raise ContractViolation(f"Conv2d input {tuple(in_shape)} too small for kernel {self.k}")
        return (self.out_channels, ho, wo)

    def flops(self, in_shape):
        ho, wo = self._out_hw(in_shape[1], in_shape[2])
        return 2 * self.in_channels * self.k * self.k * self.out_channels * ho * wo

    def forward(self, x, ctx):
        nb, _, h, w = x.shape
        ho, wo = self._out_hw(h, w)
        xh = ctx.snap(x, "conv")
        cols = kernels.im2col(xh, self.k, self.stride, self.padding)
        wm = ctx.snap(ctx.value(self.weight).reshape(self.out_channels, -1), "conv")
        out = ctx.snap(kernels.matmul(cols, np.ascontiguousarray(wm.T)), "conv")
        y = out.reshape(nb, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        y = y + ctx.value(self.bias)[None, :, None, None]
        return np.ascontiguousarray(y), (cols, wm, x.shape)

    def backward(self, dy, saved, ctx):
        cols, wm, xshape = saved
        dym = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        dyh = ctx.snap(dym, "conv")
        dw = ctx.snap(kernels.matmul(np.ascontiguousarray(dyh.T), cols), "conv")
        db = dy.sum(axis=(0, 2, 3))
        dcols = kernels.matmul(dyh, wm)
        dx = ctx.snap(kernels.col2im(dcols, xshape, self.k, self.stride, self.padding), "conv")
        return dx, {self.weight.id: dw.reshape(self.weight.master.shape), self.bias.id: db}


class SoftmaxCrossEntropy(Layer):
    kind = "loss"

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ContractViolation(f"loss layer needs flat logits, got {tuple(in_shape)}")
        return ()


class ComputeGraph:
    def __init__(self, layers, input_shape, num_classes):
        layers = list(layers)
        if not layers or not isinstance(layers[-1], SoftmaxCrossEntropy):
            raise ContractViolation("graph must end with a SoftmaxCrossEntropy layer")
        if sum(isinstance(l, SoftmaxCrossEntropy) for l in layers) != 1:
            raise ContractViolation("graph must contain exactly one loss layer")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.uid = next(_graph_ids)

        shape = self.input_shape
        self._flops = 0
        for i, layer in enumerate(layers[:-1]):
            self._flops += layer.flops(shape)
            shape = layer.output_shape(shape)
            for p in layer.params():
                if "." not in p.id:
                    p.id = f"{i}.{p.id}"
        if shape != (num_classes,):
            raise ContractViolation(f"final logits shape {shape} != ({num_classes},)")

    @property
    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def param_map(self) -> dict[str, Parameter]:
        return {p.id: p for p in self.parameters}

    def versions(self):
        return tuple(p.version for p in self.parameters)

    def flops_per_example(self) -> int:
        """Forward multiply-add count (x2) for one example."""
        return self._flops

    def state(self) -> dict[str, np.ndarray]:
        return {p.id: p.master.copy() for p in self.parameters}

    def load_state(self, state):
        for p in self.parameters:
            p.assign(state[p.id])


@dataclass
class Cache:
    graph_uid: int
    versions: tuple
    saved: list
    probs: np.ndarray
    labels: np.ndarray
    loss: float
    nonfinite: bool
    ctx: _Ctx = field(repr=False)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def forward(graph: ComputeGraph, batch: Batch, policy: PrecisionPolicy = FULL_SINGLE,
            *, dtype=np.float32, overrides=None) -> tuple[float, Cache]:
    """Mean softmax cross-entropy of ``batch``; the loss is always float32 math."""
    if tuple(batch.inputs.shape[1:]) != graph.input_shape:
        raise ContractViolation(f"batch inputs {batch.inputs.shape[1:]} != graph input {graph.input_shape}")
    labels = batch.labels
    if labels.size and (labels.min() < 0 or labels.max() >= graph.num_classes):
        raise ContractViolation("labels out of range")
    ctx = _Ctx(policy, dtype, overrides)
    x = np.asarray(batch.inputs).astype(dtype, copy=False)
    saved = []
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in graph.layers[:-1]:
            x, s = layer.forward(x, ctx)
            saved.append(s)
        z = x
        zmax = z.max(axis=1, keepdims=True)
        shifted = z - zmax
        e = np.exp(shifted)
        denom = e.sum(axis=1, keepdims=True)
        probs = e / denom
        per_example = np.log(denom[:, 0]) - shifted[np.arange(len(labels)), labels]
        loss = float(per_example.sum(dtype=np.float64) / len(labels))
    return loss, Cache(graph.uid, graph.versions(), saved, probs, labels, loss,
                       not math.isfinite(loss), ctx)


def backward(graph: ComputeGraph, cache: Cache, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of ``scale * mean loss`` keyed by parameter id.

    ``scale`` seeds the reverse pass (loss scaling); every later step is
    linear in it.
    """
    if cache.graph_uid != graph.uid or cache.versions != graph.versions():
        raise ContractViolation("stale cache: parameters changed since forward")
    ctx = cache.ctx
    n = len(cache.labels)
    onehot = np.zeros_like(cache.probs)
    onehot[np.arange(n), cache.labels] = 1
    with np.errstate(over="ignore", invalid="ignore"):
        dz = (cache.probs - onehot) / ctx.dtype(n)
        if scale != 1.0:
            dz = dz * ctx.dtype(scale)
        grads = {}
        dy = dz
        for layer, s in zip(reversed(graph.layers[:-1]), reversed(cache.saved)):
            dy, g = layer.backward(dy, s, ctx)
            grads.update(g)
    return {k: np.asarray(v, dtype=ctx.dtype) for k, v in grads.items()}


def finite_diff_check(graph: ComputeGraph, batch: Batch, eps: float = 1e-4) -> float:
    """Max relative error between central differences and :func:`backward`.

    Both sides are evaluated in float64 so the difference quotient is not
    swamped by float32 rounding.
    """
    if not (0 < eps <= 1e-2):
        raise ContractViolation(f"eps must lie in (0, 1e-2], got {eps}")
    base = {p.id: p.master.astype(np.float64) for p in graph.parameters}
    _, cache = forward(graph, batch, dtype=np.float64, overrides=base)
    analytic = backward(graph, cache)
    worst = 0.0
    for pid, value in base.items():
        flat = value.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = forward(graph, batch, dtype=np.float64, overrides=base)
            flat[i] = orig - eps
            lm, _ = forward(graph, batch, dtype=np.float64, overrides=base)
            flat[i] = orig
            num[i] = (lp - lm) / (2 * eps)
        a = analytic[pid].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst


def tiny_mlp(input_shape, hidden, num_classes, rng: Rng) -> ComputeGraph:
    input_shape = tuple(np.atleast_1d(input_shape))
    layers = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    width = int(np.prod(input_shape))
    for i, h in enumerate(hidden):
        layers += [Linear(width, h, rng.child(i)), ReLU()]
        width = h
    layers += [Linear(width, num_classes, rng.child(len(hidden))), SoftmaxCrossEntropy()]
    return ComputeGraph(layers, input_shape, num_classes)


def tiny_cnn(input_shape, channels, num_classes, rng: Rng) -> ComputeGraph:
    """Stride-2 3x3 convolutions, each followed by ReLU, then a linear head."""
    input_shape = tuple(input_shape)
    layers = []
    c, h, w = input_shape
    for i, out_c in enumerate(channels):
        conv = Conv2d(c, out_c, 3, stride=2, padding=1, rng=rng.child(i))
        layers += [conv, ReLU()]
        c, h, w = conv.output_shape((c, h, w))
    layers += [Flatten(), Linear(c * h * w, num_classes, rng.child(len(channels))),
               SoftmaxCrossEntropy()]
    return ComputeGraph(layers, input_shape, num_classes)
