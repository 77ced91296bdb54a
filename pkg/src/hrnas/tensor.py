"""Dense float tensors with reverse-mode automatic differentiation.

The kernel set is deliberately small: exactly the operations the supernet
needs (pointwise/depthwise convolutions, batch normalization, bilinear
resizing, matmul, softmax, relu, layer norm, concat/split, pooling, linear
maps) plus the scalar arithmetic required to assemble losses. Buffers are
float32 by default; tests may build float64 graphs for trustworthy
finite-difference oracles, and every kernel preserves the dtype it is given.

Forward passes are deterministic: identical inputs produce bit-identical
outputs and gradients. There is no broadcasting beyond what individual
kernels define.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes disagree with a kernel's contract."""


class ConfigurationError(ValueError):
    """Unsupported kernel size, stride or layer setting."""


# ---------------------------------------------------------------------------
# Global evaluation modes
# ---------------------------------------------------------------------------

_grad_enabled = True
_bn_stats_frozen = False
_mac_counter: "MacCounter | None" = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forwards run as plain numpy."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def freeze_bn_stats():
    """Suppress running-statistic updates in train-mode batch norm."""
    global _bn_stats_frozen
    prev = _bn_stats_frozen
    _bn_stats_frozen = True
    try:
        yield
    finally:
        _bn_stats_frozen = prev


class MacCounter:
    """Accumulates multiply-accumulate counts reported by instrumented kernels."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, macs: int) -> None:
        self.total += int(macs)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Instrument conv/matmul/linear kernels; yields the accumulating counter."""
    global _mac_counter
    prev = _mac_counter
    counter = MacCounter()
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = prev


def _record_macs(macs: int) -> None:
    if _mac_counter is not None:
        _mac_counter.add(macs)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """N-dimensional float array participating in a reverse-mode graph.

    `grad` mirrors `data`'s shape for leaves created with requires_grad=True;
    interior nodes never store gradients (backward uses a transient map).
    `velocity` is optimizer scratch that structural pruning keeps aligned
    with `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "velocity", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.velocity = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = True
        t.velocity = None
        t._parents = parents
        t._backward = backward
        return t

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- gradients -----------------------------------------------------------

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        """Populate leaf gradients by reverse-mode accumulation from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- scalar/elementwise arithmetic ---------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        out = self.data + other
        return _wrap(out, (self,), lambda g: (g,))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        out = self.data * other
        return _wrap(out, (self,), lambda g: (g * other,))

    __rmul__ = __mul__

    def __neg__(self):
        return _wrap(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, -other)
        return self + (-other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported kernel")
        return self * (1.0 / other)


def _wrap(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor._node(data, parents, backward)
    return Tensor(data)


def autograd_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Extension hook: wrap an externally computed result as a graph node.

    `backward(grad_out)` must return one gradient array (or None) per parent.
    """
    return _wrap(np.asarray(data), tuple(parents), backward)


# ---------------------------------------------------------------------------
# Convolution kernels
# ---------------------------------------------------------------------------


def conv2d_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: out[n,o,h,w] = sum_c weight[o,c] * x[n,c,h,w] (+ bias[o])."""
    if x.ndim != 4:
        raise ShapeError(f"pointwise conv expects N×C×H×W input, got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"pointwise weight {weight.shape} does not match input channels of {x.shape}"
        )
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias {bias.shape} does not match {c_out} output channels")
    _record_macs(n * c * c_out * h * w)
    flat = x.data.reshape(n, c, h * w)
    out = np.matmul(weight.data, flat).reshape(n, c_out, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        gf = g.reshape(n, c_out, h * w)
        dx = np.matmul(weight.data.T, gf).reshape(n, c, h, w)
        dw = np.matmul(gf, flat.transpose(0, 2, 1)).sum(axis=0)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _wrap(out, parents, backward)


def conv2d_depthwise(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Per-channel k×k convolution with same-padding ⌊k/2⌋; H' = ⌈H/stride⌉."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise conv expects N×C×H×W input, got {x.shape}")
    if weight.ndim != 3 or weight.shape[1] != weight.shape[2]:
        raise ShapeError(f"depthwise weight must be C×k×k, got {weight.shape}")
    k = weight.shape[1]
    if k not in (3, 5, 7):
        raise ConfigurationError(f"unsupported depthwise kernel size {k} (expected 3, 5 or 7)")
    if stride not in (1, 2):
        raise ConfigurationError(f"unsupported stride {stride} (expected 1 or 2)")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise weight channels {weight.shape[0]} != input channels {x.shape[1]}"
        )
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    _record_macs(n * c * k * k * h_out * w_out)
    out = np.einsum("nchwij,cij->nchw", windows, weight.data)

    def backward(g: np.ndarray):
        dw = np.einsum("nchw,nchwij->cij", g, windows)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    g * weight.data[None, :, i, j, None, None]
                )
        dx = gxp[:, :, p : p + h, p : p + w]
        return dx, dw

    return _wrap(out, (x, weight), backward)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


class Module:
    """Minimal container: attribute-scanned parameter/state traversal.

    Child modules and parameters are discovered from instance attributes
    (lists of modules/tensors included), in insertion order, which makes
    traversal deterministic for a deterministic construction order.
    """

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Parameters plus persistent buffers, for serialization."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value.data
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item.data
        for bname in getattr(self, "_buffer_names", ()):
            yield prefix + bname, getattr(self, bname)
        for cname, child in self._children():
            yield from child.named_state(prefix + cname + ".")

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameters/buffers in place from a name→array mapping."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                _assign(value, arrays, name, "")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor) and item.requires_grad:
                        _assign(item, arrays, f"{name}.{i}", "")
        for bname in getattr(self, "_buffer_names", ()):
            if bname in arrays:
                getattr(self, bname)[...] = arrays[bname]
        for cname, child in self._children():
            sub = {
                k[len(cname) + 1 :]: v for k, v in arrays.items() if k.startswith(cname + ".")
            }
            child.load_state(sub)

    def apply_modules(self, fn: Callable[["Module"], None]) -> None:
        fn(self)
        for _, child in self._children():
            child.apply_modules(fn)

    def train(self) -> None:
        self.apply_modules(lambda m: setattr(m, "training", True) if hasattr(m, "training") else None)

    def eval(self) -> None:
        self.apply_modules(lambda m: setattr(m, "training", False) if hasattr(m, "training") else None)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _assign(tensor: Tensor, arrays: dict[str, np.ndarray], name: str, prefix: str) -> None:
    key = prefix + name
    if key not in arrays:
        return
    arr = arrays[key]
    if arr.shape != tensor.data.shape:
        raise ShapeError(f"state array {key} has shape {arr.shape}, expected {tensor.data.shape}")
    tensor.data[...] = arr


class BatchNorm(Module):
    """Per-channel batch normalization state for N×C×H×W feature maps.

    Train mode normalizes by batch statistics over (N, H, W) and blends the
    running buffers with `momentum`; eval mode uses the running buffers and
    requires them to have been populated (or explicitly initialized).
    During recalibration the running buffers are rebuilt by cumulative
    averaging of per-batch statistics.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(
        self,
        channels: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        dtype=DEFAULT_DTYPE,
        init_stats: bool = False,
    ):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.training = True
        self.initialized = bool(init_stats)
        self.recalibrating = False
        self.batches_tracked = 0

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def reset_running_stats(self) -> None:
        self.running_mean[...] = 0
        self.running_var[...] = 1
        self.batches_tracked = 0
        self.initialized = False

    def prune_channels(self, keep: np.ndarray) -> None:
        for t in (self.gamma, self.beta):
            take_axis(t, 0, keep)
        self.running_mean = np.ascontiguousarray(self.running_mean[keep])
        self.running_var = np.ascontiguousarray(self.running_var[keep])


def batch_norm(x: Tensor, state: BatchNorm) -> Tensor:
    """Normalize an N×C×H×W map with the given state (mode taken from state)."""
    if x.ndim != 4:
        raise ShapeError(f"batch norm expects N×C×H×W input, got {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"input channels {x.shape[1]} != state channels {state.channels}")
    gamma, beta = state.gamma, state.beta
    axes = (0, 2, 3)
    if state.training or state.recalibrating:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.recalibrating:
            state.batches_tracked += 1
            t = state.batches_tracked
            if t == 1:
                # direct assignment: the reset values must not leak into the average
                state.running_mean[...] = mean
                state.running_var[...] = var
            else:
                state.running_mean += (mean.astype(state.running_mean.dtype) - state.running_mean) / t
                state.running_var += (var.astype(state.running_var.dtype) - state.running_var) / t
            state.initialized = True
        elif not _bn_stats_frozen:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var
            state.initialized = True
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        count = x.data.size // x.shape[1]

        def backward(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (inv[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return _wrap(out, (x, gamma, beta), backward)

    if not state.initialized:
        raise RuntimeError("batch norm used in eval mode before running statistics exist")
    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_eval(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = g * (gamma.data * inv)[None, :, None, None]
        return dx, dgamma, dbeta

    return _wrap(out, (x, gamma, beta), backward_eval)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then scale/shift elementwise."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer norm params must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def backward(g: np.ndarray):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (inv / d) * (d * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _wrap(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------

_RESIZE_PLANS: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix under half-pixel-center sampling."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize spatial dims with half-pixel-center bilinear sampling."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear resize expects N×C×H×W input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}×{out_w}")
    n, c, h, w = x.shape
    key = (h, w, out_h, out_w, x.data.dtype.str)
    if key not in _RESIZE_PLANS:
        _RESIZE_PLANS[key] = (
            _resize_matrix(h, out_h, x.data.dtype),
            _resize_matrix(w, out_w, x.data.dtype),
        )
    ry, rx = _RESIZE_PLANS[key]
    out = np.einsum("ay,ncyx,bx->ncab", ry, x.data, rx)

    def backward(g: np.ndarray):
        return (np.einsum("ay,ncab,bx->ncyx", ry, g, rx),)

    return _wrap(out, (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and activations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects ≥2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    _record_macs(out.size * a.shape[-1])

    def backward(g: np.ndarray):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return _wrap(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ weight (+ bias)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear weight {weight.shape} does not fit input {x.shape}")
    d_in, d_out = weight.shape
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"bias {bias.shape} does not match {d_out} outputs")
    _record_macs((x.size // d_in) * d_in * d_out)
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray):
        dx = g @ weight.data.T
        gf = g.reshape(-1, d_out)
        dw = x.data.reshape(-1, d_in).T @ gf
        if bias is None:
            return dx, dw
        return dx, dw, gf.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _wrap(out, parents, backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _wrap(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient at 0 is 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _wrap(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires matching shapes, got {a.shape} and {b.shape}")
    return _wrap(a.data + b.data, (a, b), lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply requires matching shapes, got {a.shape} and {b.shape}")
    return _wrap(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)  # sign(0) == 0, matching the L1 subgradient convention

    def backward(g: np.ndarray):
        return (g * sign,)

    return _wrap(np.abs(x.data), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _wrap(out, tuple(xs), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        return (dx,)

    return _wrap(out, (x,), backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover {x.shape[1]} channels")
    outs = []
    offset = 0
    for s in sizes:
        outs.append(narrow(x, 1, offset, s))
        offset += s
    return outs


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global average pool expects N×C×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _wrap(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _wrap(out, (x,), backward)


def transpose_last2(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)

    def backward(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return _wrap(out, (x,), backward)


def expand_batch(x: Tensor, n: int) -> Tensor:
    """Prepend a batch axis of size n by repetition; gradient sums over it."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def backward(g: np.ndarray):
        return (g.sum(axis=0),)

    return _wrap(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _wrap(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = 1.0 / x.size

    def backward(g: np.ndarray):
        return (np.broadcast_to(g * inv, x.shape).copy(),)

    return _wrap(out, (x,), backward)


# ---------------------------------------------------------------------------
# Structural pruning support
# ---------------------------------------------------------------------------


def take_axis(t: Tensor, axis: int, keep: np.ndarray) -> None:
    """Slice a tensor (and aligned grad/velocity) in place along one axis."""
    t.data = np.ascontiguousarray(np.take(t.data, keep, axis=axis))
    if t.grad is not None:
        t.grad = np.zeros_like(t.data)
    if t.velocity is not None:
        t.velocity = np.ascontiguousarray(np.take(t.velocity, keep, axis=axis))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(
    forward: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float,
    sample_fraction: float | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    `forward` is a deterministic zero-argument callable returning a scalar
    Tensor that closes over `params`. Build the graph in float64 for a
    trustworthy oracle; the differences themselves accumulate in 64-bit
    regardless. When `sample_fraction` is given, only a seeded random subset
    of each parameter's entries is probed.

    Entries whose probe interval straddles a kink (relu) are re-probed at
    geometrically smaller steps: the artifact shrinks with the step while a
    genuine gradient error does not, so the reported worst error reflects
    real defects only.
    """
    if not (step > 0) or not math.isfinite(step):
        raise ValueError(f"finite-difference step must be a positive finite float, got {step}")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    out = forward()
    if out.data.size != 1:
        raise ShapeError(f"forward must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise ValueError("forward produced a non-finite value")
    out.backward()
    if sample_fraction is not None and rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        if sample_fraction is None:
            indices = range(flat.size)
        else:
            k = max(1, int(round(sample_fraction * flat.size)))
            indices = sorted(rng.choice(flat.size, size=min(k, flat.size), replace=False).tolist())
        for i in indices:
            orig = float(flat[i])

            def central(h: float) -> float:
                with no_grad():
                    flat[i] = orig + h
                    f_plus = float(forward().data)
                    flat[i] = orig - h
                    f_minus = float(forward().data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise ValueError("forward produced a non-finite value during probing")
                return (f_plus - f_minus) / (2.0 * h)

            g = float(gflat[i])

            def rel(fd: float) -> float:
                return abs(g - fd) / max(abs(g), abs(fd), 1e-2)

            err = rel(central(step))
            h = step
            for _ in range(2):
                if err <= 1e-4:
                    break
                h /= 16.0
                err = min(err, rel(central(h)))
            if err > worst:
                worst = err
    return worst
