"""Minimal reverse-mode automatic differentiation over dense 4-D tensors.

Tensors are laid out (batch, channels, height, width) in float32 or float64.
A :class:`Graph` is a define-by-run tape: while one is active (``with Graph()
as g:``), every op that touches a gradient-requiring tensor appends a node,
and ``g.backward(loss)`` walks the tape once in reverse. With no active graph
the same ops run as pure numpy functions, which is how the classical
(non-trainable) filters share code with their trainable counterparts.

Convolution follows the usual "conv layer" convention: it is
cross-correlation (kernels are not flipped). Borders are zero padded for
conv2d and count-normalized for box_mean.
"""

import contextlib
import contextvars

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

from .exceptions import ConfigurationError, NumericError, StateError

_active_graph = contextvars.ContextVar("vesselkit_active_graph", default=None)

# Divisions abort below this denominator magnitude instead of emitting junk.
DIVIDE_GUARD = 1e-12

_FINITE_CHECKS = True

# Deliberate gradient corruption hook used by the checker's negative control.
_GRAD_FAULT = None


def set_finite_checks(enabled):
    """Globally enable/disable per-op NaN/Inf detection. Returns prior state."""
    global _FINITE_CHECKS
    prior = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prior


@contextlib.contextmanager
def no_grad():
    """Run ops without recording, even if a graph is active."""
    token = _active_graph.set(None)
    try:
        yield
    finally:
        _active_graph.reset(token)


@contextlib.contextmanager
def inject_gradient_fault(op_kind, factor=1.5):
    """Scale the gradients produced by one op kind, to exercise grad_check
    failure paths. Test/diagnostic hook only."""
    global _GRAD_FAULT
    prior = _GRAD_FAULT
    _GRAD_FAULT = (op_kind, float(factor))
    try:
        yield
    finally:
        _GRAD_FAULT = prior


class Tensor:
    """Dense (batch, channels, height, width) float array, optionally
    participating in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ConfigurationError(
                f"Tensor must be 4-D (batch, channels, height, width), got shape {arr.shape}"
            )
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ConfigurationError(f"item() requires a scalar tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def plane(self):
        """The (H, W) view of a single-image single-channel tensor."""
        if self.shape[0] != 1 or self.shape[1] != 1:
            raise ConfigurationError(f"plane() requires shape (1, 1, H, W), got {self.shape}")
        return self.data[0, 0]

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"


def from_plane(arr, requires_grad=False, dtype=None, name=None):
    """Wrap an (H, W) array as a (1, 1, H, W) tensor."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ConfigurationError(f"expected a 2-D plane, got shape {arr.shape}")
    return Tensor(arr[None, None], requires_grad=requires_grad, dtype=dtype, name=name)


def scalar(value, dtype=np.float64, requires_grad=False, name=None):
    """A (1, 1, 1, 1) tensor holding one value (scalar broadcast operand)."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype), requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Graph:
    """Define-by-run tape. Single-writer: forward recording, backward, and
    reset must be externally serialized. Distinct graphs are independent."""

    def __init__(self):
        self._tape = []
        self._consumed = False
        self._token = None

    def __enter__(self):
        if _active_graph.get() is not None:
            raise StateError("another graph is already recording")
        if self._consumed:
            raise StateError("graph already consumed by backward; call reset() first")
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_graph.reset(self._token)
        self._token = None
        return False

    def _append(self, node):
        if self._consumed:
            raise StateError("graph already consumed by backward; call reset() first")
        self._tape.append(node)

    def __len__(self):
        return len(self._tape)

    def backward(self, loss):
        """Accumulate d(loss)/d(tensor) into .grad of every requires_grad leaf
        reachable from ``loss``. One pass per recorded forward."""
        if self._consumed:
            raise StateError("graph already consumed by backward; call reset() first")
        if not self._tape:
            raise StateError("backward before forward: the graph recorded no operations")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ConfigurationError("backward requires a scalar loss tensor")
        produced = {id(node.out) for node in self._tape}
        if id(loss) not in produced:
            raise StateError("loss tensor was not produced by this graph")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._tape):
            out_grad = grads.pop(id(node.out), None)
            if out_grad is None:
                continue  # not on a path from the loss
            input_grads = node.bwd(out_grad)
            if _GRAD_FAULT is not None and _GRAD_FAULT[0] == node.op:
                input_grads = tuple(
                    None if g is None else g * _GRAD_FAULT[1] for g in input_grads
                )
            for tensor, g in zip(node.inputs, input_grads):
                if g is None:
                    continue
                if _FINITE_CHECKS and not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient produced by op '{node.op}'")
                if id(tensor) in produced:
                    acc = grads.get(id(tensor))
                    grads[id(tensor)] = g if acc is None else acc + g
                elif tensor.requires_grad:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += g.astype(tensor.data.dtype, copy=False)
        self._consumed = True

    def reset(self):
        """Clear the tape and the gradients of every leaf it touched, making
        the graph reusable for a fresh forward pass."""
        produced = {id(node.out) for node in self._tape}
        for node in self._tape:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    tensor.grad = None
        self._tape.clear()
        self._consumed = False


def active_graph():
    return _active_graph.get()


def _check_finite(op, data):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in output of op '{op}'")


def _record(op, inputs, out_data, bwd):
    graph = _active_graph.get()
    _check_finite(op, out_data)
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        graph._append(_Node(op, tuple(inputs), out, bwd))
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return scalar(float(x), dtype=dtype)


def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _unbroadcast(g, tensor):
    """Reduce a full-shape gradient back to a scalar operand's shape."""
    if tensor.shape == g.shape:
        return g
    return g.sum(dtype=g.dtype).reshape(1, 1, 1, 1)


# ---------------------------------------------------------------------------
# pointwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return (
            _unbroadcast(g, a) if a.requires_grad else None,
            _unbroadcast(g, b) if b.requires_grad else None,
        )

    return _record("add", (a, b), out, bwd)


def subtract(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _binary_shapes(a, b, "subtract")
    out = a.data - b.data

    def bwd(g):
        return (
            _unbroadcast(g, a) if a.requires_grad else None,
            _unbroadcast(-g, b) if b.requires_grad else None,
        )

    return _record("subtract", (a, b), out, bwd)


def multiply(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _binary_shapes(a, b, "multiply")
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return (
            _unbroadcast(g * bd, a) if a.requires_grad else None,
            _unbroadcast(g * ad, b) if b.requires_grad else None,
        )

    return _record("multiply", (a, b), out, bwd)


def divide(a, b, guard=DIVIDE_GUARD):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _binary_shapes(a, b, "divide")
    ad, bd = a.data, b.data
    small = np.abs(bd) < guard
    if np.any(small):
        loc = np.unravel_index(int(np.argmax(small)), bd.shape)
        raise NumericError(
            f"divide: denominator magnitude below guard {guard:g} at index {loc}"
        )
    out = ad / bd

    def bwd(g):
        ga = g / bd
        return (
            _unbroadcast(ga, a) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), b) if b.requires_grad else None,
        )

    return _record("divide", (a, b), out, bwd)


def affine(x, mul=1.0, shift=0.0):
    """y = mul * x + shift with python-float constants."""
    mul = float(mul)
    out = x.data * mul + shift

    def bwd(g):
        return (g * mul,)

    return _record("affine", (x,), out, bwd)


def negate(x):
    return affine(x, -1.0, 0.0)


def exp(x):
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (x,), out, bwd)


def log(x, guard=1e-300):
    if np.any(x.data < guard):
        raise NumericError("log: input must be strictly positive")
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _record("log", (x,), out, bwd)


def sqrt(x):
    if np.any(x.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return _record("sqrt", (x,), out, bwd)


def square(x):
    xd = x.data
    out = xd * xd

    def bwd(g):
        return (g * (2.0 * xd),)

    return _record("square", (x,), out, bwd)


def absolute(x):
    xd = x.data
    out = np.abs(xd)

    def bwd(g):
        return (g * np.sign(xd),)

    return _record("absolute", (x,), out, bwd)


def power(x, exponent):
    """x ** exponent for x >= 0 and a python-float exponent."""
    p = float(exponent)
    xd = x.data
    if np.any(xd < 0):
        raise NumericError("power: negative base")
    out = xd ** p

    def bwd(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * xd ** (p - 1.0)
        if p < 1.0:
            d = np.where(xd > 0, d, 0.0)  # subgradient 0 at the boundary
        elif p == 1.0:
            d = np.ones_like(xd)
        else:
            d = np.where(xd > 0, d, 0.0)
        return (g * d,)

    return _record("power", (x,), out, bwd)


def sigmoid(x):
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, bwd)


def leaky_relu(x, slope=0.2):
    slope = float(slope)
    xd = x.data
    out = np.where(xd >= 0, xd, slope * xd)

    def bwd(g):
        return (g * np.where(xd >= 0, 1.0, slope),)

    return _record("leaky_relu", (x,), out.astype(xd.dtype, copy=False), bwd)


def relu(x):
    return leaky_relu(x, 0.0)


def select(condition, a, b):
    """Elementwise a-where-condition-else-b. ``condition`` is a constant bool
    array; gradients route through the chosen branch only."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    cond = np.asarray(condition, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a) if a.requires_grad else None,
            _unbroadcast(np.where(cond, 0.0, g), b) if b.requires_grad else None,
        )

    return _record("select", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(tensors):
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ConfigurationError("concat_channels: batch/spatial shapes differ")
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bwd(g):
        return tuple(
            g[:, offsets[i] : offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _record("concat_channels", tensors, out, bwd)


def slice_channels(x, start, stop):
    if not (0 <= start < stop <= x.shape[1]):
        raise ConfigurationError(f"slice_channels: [{start}:{stop}] out of range for {x.shape}")
    out = x.data[:, start:stop].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_channels", (x,), out, bwd)


def pad_reflect(x, pads):
    """Mirror padding (top, bottom, left, right) without edge repetition."""
    t, b, l, r = pads
    H, W = x.shape[2], x.shape[3]
    if t >= H or b >= H or l >= W or r >= W:
        raise ConfigurationError("pad_reflect: pad size must be smaller than the image")
    out = np.pad(x.data, ((0, 0), (0, 0), (t, b), (l, r)), mode="reflect")
    rows = np.pad(np.arange(H), (t, b), mode="reflect")
    cols = np.pad(np.arange(W), (l, r), mode="reflect")

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (dx,)

    return _record("pad_reflect", (x,), out, bwd)


def crop(x, top, left, height, width):
    if top + height > x.shape[2] or left + width > x.shape[3]:
        raise ConfigurationError("crop: window exceeds tensor bounds")
    out = x.data[:, :, top : top + height, left : left + width].copy()

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, :, top : top + height, left : left + width] = g
        return (dx,)

    return _record("crop", (x,), out, bwd)


def maxpool2(x):
    """2x2 max pooling, stride 2. First index wins ties."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ConfigurationError("maxpool2 requires even spatial dimensions")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(B, C, H, W),)

    return _record("maxpool2", (x,), out, bwd)


def upsample2(x):
    """Nearest-neighbor 2x upsampling."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g):
        B, C, H2, W2 = g.shape
        return (g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)),)

    return _record("upsample2", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x):
    out = np.full((1, 1, 1, 1), x.data.sum(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)

    return _record("reduce_sum", (x,), out, bwd)


def reduce_mean(x):
    n = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean(dtype=np.float64), dtype=x.dtype)

    def bwd(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return _record("reduce_mean", (x,), out, bwd)


def reduce_max_channels(x):
    """Per-pixel maximum over the channel axis; gradient goes to the first
    maximal channel."""
    idx = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=1)
        return (dx,)

    return _record("reduce_max_channels", (x,), out, bwd)


def reduce(x, kind):
    if kind == "sum":
        return reduce_sum(x)
    if kind == "mean":
        return reduce_mean(x)
    if kind == "max_over_channels":
        return reduce_max_channels(x)
    raise ConfigurationError(f"unknown reduction kind {kind!r}")


# ---------------------------------------------------------------------------
# softmax


def softmax_channels(x):
    if x.shape[1] < 2:
        raise ConfigurationError("softmax_channels requires at least 2 channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_channels", (x,), out, bwd)


# ---------------------------------------------------------------------------
# box mean


def _box_sum(data, radius):
    """Windowed sum over (2r+1)^2 with windows clipped at the borders.
    Accumulates in float64 regardless of input dtype."""
    B, C, H, W = data.shape
    ii = np.zeros((B, C, H + 1, W + 1), dtype=np.float64)
    ii[:, :, 1:, 1:] = data.astype(np.float64, copy=False).cumsum(axis=2).cumsum(axis=3)
    r = radius
    rlo = np.clip(np.arange(H) - r, 0, None)
    rhi = np.minimum(np.arange(H) + r + 1, H)
    clo = np.clip(np.arange(W) - r, 0, None)
    chi = np.minimum(np.arange(W) + r + 1, W)
    rows = ii[:, :, rhi, :] - ii[:, :, rlo, :]
    sums = rows[:, :, :, chi] - rows[:, :, :, clo]
    counts = (rhi - rlo)[:, None] * (chi - clo)[None, :]
    return sums, counts.astype(np.float64)


def box_mean(x, radius):
    """Mean over a (2r+1)^2 window; border windows are normalized by their
    in-image pixel count. Differentiable."""
    radius = int(radius)
    if radius < 0:
        raise ConfigurationError("box_mean: radius must be non-negative")
    B, C, H, W = x.shape
    if radius >= min(H, W):
        raise ConfigurationError(f"box_mean: radius {radius} too large for {H}x{W} image")
    if radius == 0:
        out = x.data.copy()

        def bwd0(g):
            return (g,)

        return _record("box_mean", (x,), out, bwd0)

    sums, counts = _box_sum(x.data, radius)
    out = (sums / counts).astype(x.dtype, copy=False)

    def bwd(g):
        back, _ = _box_sum(np.asarray(g, dtype=np.float64) / counts, radius)
        return (back.astype(x.dtype, copy=False),)

    return _record("box_mean", (x,), out, bwd)


# ---------------------------------------------------------------------------
# channel-wise affine and batch normalization


def channel_affine(x, scale, shift):
    """y[b,c] = x[b,c] * scale[c] + shift[c]; scale/shift shaped (1, C, 1, 1)."""
    C = x.shape[1]
    if scale.shape != (1, C, 1, 1) or shift.shape != (1, C, 1, 1):
        raise ConfigurationError("channel_affine: scale/shift must be shaped (1, C, 1, 1)")
    out = x.data * scale.data + shift.data

    def bwd(g):
        return (
            g * scale.data if x.requires_grad else None,
            (g * x.data).sum(axis=(0, 2, 3), keepdims=True) if scale.requires_grad else None,
            g.sum(axis=(0, 2, 3), keepdims=True) if shift.requires_grad else None,
        )

    return _record("channel_affine", (x, scale, shift), out, bwd)


def batch_norm_train(x, scale, shift, eps=1e-5):
    """Batch statistics normalization. Returns (out, batch_mean, batch_var)
    where the statistics are plain per-channel arrays for running-average
    updates by the caller."""
    C = x.shape[1]
    if scale.shape != (1, C, 1, 1) or shift.shape != (1, C, 1, 1):
        raise ConfigurationError("batch_norm: scale/shift must be shaped (1, C, 1, 1)")
    xd = x.data
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    out = xhat * scale.data + shift.data

    def bwd(g):
        dxhat = g * scale.data
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return (
            dx.astype(xd.dtype, copy=False) if x.requires_grad else None,
            (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if scale.requires_grad else None,
            g.sum(axis=(0, 2, 3), keepdims=True) if shift.requires_grad else None,
        )

    t = _record("batch_norm", (x, scale, shift), out, bwd)
    return t, mean.reshape(C), var.reshape(C)


def batch_norm_infer(x, scale, shift, running_mean, running_var, eps=1e-5):
    C = x.shape[1]
    inv_std = 1.0 / np.sqrt(running_var.reshape(1, C, 1, 1) + eps)
    mean = running_mean.reshape(1, C, 1, 1)
    out = (x.data - mean) * inv_std * scale.data + shift.data
    xhat = (x.data - mean) * inv_std

    def bwd(g):
        return (
            g * (inv_std * scale.data) if x.requires_grad else None,
            (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if scale.requires_grad else None,
            g.sum(axis=(0, 2, 3), keepdims=True) if shift.requires_grad else None,
        )

    return _record("batch_norm", (x, scale, shift), out, bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x_shape, w_shape, stride, dilation, padding):
    B, C, H, W = x_shape
    O, CK, kh, kw = w_shape
    if CK != C:
        raise ConfigurationError(f"conv2d: kernel expects {CK} input channels, tensor has {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    Ho = (H + 2 * padding - eh) // stride + 1
    Wo = (W + 2 * padding - ew) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigurationError("conv2d: effective kernel larger than padded input")
    return B, C, H, W, O, kh, kw, eh, ew, Ho, Wo


def _windows(xp, kh, kw, eh, ew, stride, dilation):
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :, :, :kh, :kw]


def _use_fft(C, O, kh, kw, stride, dilation):
    return stride == 1 and dilation == 1 and kh * kw > 81 and C * O <= 8


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """2-D cross-correlation with zero padding.

    weight is (out_channels, in_channels, kh, kw) with odd kh, kw. Gradients
    w.r.t. input, weight, and bias are all registered.
    """
    B, C, H, W, O, kh, kw, eh, ew, Ho, Wo = _conv_geometry(
        x.shape, weight.shape, stride, dilation, padding
    )
    if bias is not None and bias.shape != (1, O, 1, 1):
        raise ConfigurationError(f"conv2d: bias must be shaped (1, {O}, 1, 1)")
    p = padding
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    fft_path = _use_fft(C, O, kh, kw, stride, dilation)

    if fft_path:
        # correlation == convolution with a flipped kernel
        wf = wd[:, :, ::-1, ::-1]
        out = fftconvolve(xp[:, None], wf[None], mode="valid", axes=(3, 4)).sum(axis=2)
    else:
        win = _windows(xp, kh, kw, eh, ew, stride, dilation)
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=xd.dtype)
    if bias is not None:
        out += bias.data

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            if fft_path:
                full = fftconvolve(g[:, :, None], wd[None], mode="full", axes=(3, 4)).sum(axis=1)
                gx = full[:, :, p : p + H, p : p + W]
            else:
                t = np.tensordot(g, wd, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
                t = t.transpose(4, 5, 0, 3, 1, 2)  # kh,kw,B,C,Ho,Wo
                dxp = np.zeros_like(xp)
                s, d = stride, dilation
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, u * d : u * d + Ho * s : s, v * d : v * d + Wo * s : s] += t[u, v]
                gx = dxp[:, :, p : p + H, p : p + W] if p else dxp
            gx = np.ascontiguousarray(gx, dtype=xd.dtype)
        if weight.requires_grad:
            if fft_path:
                gf = g[:, :, ::-1, ::-1]
                gw = fftconvolve(xp[:, None], gf[:, :, None], mode="valid", axes=(3, 4)).sum(axis=0)
            else:
                win = _windows(xp, kh, kw, eh, ew, stride, dilation)
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gw = np.ascontiguousarray(gw, dtype=wd.dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1).astype(xd.dtype, copy=False)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", inputs, out, bwd)
