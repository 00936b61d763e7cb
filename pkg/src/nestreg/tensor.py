"""Reverse-mode tensor core on top of raw numpy arrays.

A ``Tensor`` wraps one numpy array in a fixed precision (float32 or float64).
While a ``GradTape`` is active, every primitive records (inputs, output, vjp)
onto it; ``GradTape.backward`` replays the records once, in reverse order,
and deposits gradients on the participating leaves.  Without an active tape
the same primitives run as plain numpy, which is the evaluation fast path.

Tapes are confined to the thread that opened them (the active-tape stack is
thread-local); tensors themselves are plain containers and may be shared
read-only.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy import special as _special

from .errors import ConfigError, ContractError, NumericError, ShapeError

DTYPES = {32: np.float32, 64: np.float64}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A numpy array plus a gradient slot.

    ``requires_grad`` on a leaf marks it as trainable; on an op output it just
    means "this value is connected to a leaf on the active tape".
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, bits: int) -> "Tensor":
        """Precision cast (non-differentiable; for IO and fixtures)."""
        return Tensor(self.data.astype(DTYPES[bits]), requires_grad=self.requires_grad)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"{what} contains NaN/Inf")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype.name})"


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_TAPES = _TapeStack()


def _active_tape():
    return _TAPES.stack[-1] if _TAPES.stack else None


class GradTape:
    """Ordered record of every primitive executed while the tape is active.

    The forward pass appends records in execution (topological) order, so a
    single reverse sweep visits each op exactly once with its output gradient
    complete before its input gradients are produced.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append((output, inputs, vjp))
        self._produced.add(id(output))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every
        requires_grad leaf that was touched while recording.

        Leaves not reachable from ``loss`` receive zero gradients.  Gradients
        are assigned fresh (not accumulated across backward calls).
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward root must be a scalar, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for output, inputs, vjp in reversed(self._records):
            for t in inputs:
                if t.requires_grad and id(t) not in self._produced:
                    leaves[id(t)] = t
            g = grads.pop(id(output), None)
            if g is None:
                continue
            parts = vjp(g)
            for t, part in zip(inputs, parts):
                if part is None or not t.requires_grad:
                    continue
                slot = grads.get(id(t))
                if slot is None:
                    grads[id(t)] = part
                else:
                    slot += part
        for tid, leaf in leaves.items():
            g = grads.get(tid)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g)


def make_op(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create an op output, recording it when a tape is active.

    ``vjp(grad_out) -> tuple`` must return one array (or None) per input.
    Extension modules use this to define new primitives.
    """
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, tuple(inputs), vjp)
    return out


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(
            f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}; "
            "cast explicitly with astype()"
        )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _triple(value, what: str) -> tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ConfigError(f"{what} must be an int or a length-3 sequence, got {value}")
    return value


def _pad_pairs(padding) -> tuple[tuple[int, int], ...]:
    """Normalize padding to three (low, high) pairs."""
    if isinstance(padding, int):
        return ((padding, padding),) * 3
    padding = tuple(padding)
    if len(padding) != 3:
        raise ConfigError(f"padding must describe 3 axes, got {padding!r}")
    pairs = []
    for p in padding:
        if isinstance(p, int):
            pairs.append((p, p))
        else:
            lo, hi = p
            pairs.append((int(lo), int(hi)))
    return tuple(pairs)


def same_padding(kernel: int, dilation: int = 1) -> tuple[int, int]:
    """(low, high) padding that keeps the extent under stride 1."""
    total = dilation * (kernel - 1)
    return (total - total // 2, total // 2)


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "add")
    out = a.data + b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "sub")
    out = a.data - b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    out = a.data * b.data
    return make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "div")
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return make_op(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (non-repeating) indexing with ints and slices."""
    out = a.data[key]

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        return (buf,)

    return make_op(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    for p in parts[1:]:
        _check_same_dtype(parts[0], p, "concat")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return make_op(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(ax % len(in_shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return make_op(
        out, (a,), lambda g: (_expand_reduced(g, a.data.shape, axis, keepdims).copy(),)
    )


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if out.size == 0 else a.data.size // max(out.size, 1)

    def vjp(g):
        return (_expand_reduced(g, a.data.shape, axis, keepdims) / count,)

    return make_op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _special.expit(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of exact (erf-based) GELU: Phi(x) + x * phi(x)."""
    cdf = 0.5 * (1.0 + _special.erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return cdf + x * pdf


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = x * (0.5 * (1.0 + _special.erf(x * _INV_SQRT2)))
    return make_op(out, (a,), lambda g: (g * _gelu_grad(x),))


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return make_op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over a single axis; gamma/beta are 1-D of that axis length."""
    _check_same_dtype(a, gamma, "layernorm")
    _check_same_dtype(a, beta, "layernorm")
    axis = axis % a.ndim
    n = a.data.shape[axis]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(
            f"layernorm: gamma/beta must have shape ({n},), got "
            f"{gamma.data.shape} and {beta.data.shape} for input {a.data.shape}"
        )
    pshape = [1] * a.ndim
    pshape[axis] = n
    gb = gamma.data.reshape(pshape)
    bb = beta.data.reshape(pshape)

    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gb + bb

    others = tuple(i for i in range(a.ndim) if i != axis)

    def vjp(g):
        gbeta = g.sum(axis=others) if others else g.copy()
        ggamma = (g * xhat).sum(axis=others) if others else g * xhat
        gh = g * gb
        gx = inv * (
            gh
            - gh.mean(axis=axis, keepdims=True)
            - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_op(out, (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# 3-D convolution
# ---------------------------------------------------------------------------


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
) -> Tensor:
    """Grouped, strided, dilated 3-D convolution (cross-correlation).

    x: [C_in, D, H, W]; weight: [C_out, C_in/groups, kd, kh, kw]; bias: [C_out].
    Output extent per axis: (ext + lo + hi - dilation*(k-1) - 1)//stride + 1.
    """
    _check_same_dtype(x, weight, "conv3d")
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(
            f"conv3d expects x [C,D,H,W] and weight [O,I,kd,kh,kw], got "
            f"{x.data.shape} and {weight.data.shape}"
        )
    cin = x.data.shape[0]
    cout, cin_g, kd, kh, kw = weight.data.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(
            f"conv3d: groups={groups} must divide C_in={cin} and C_out={cout}"
        )
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv3d: weight expects {cin_g} channels/group but input provides "
            f"{cin // groups} ({cin} channels, {groups} groups)"
        )
    strides = _triple(stride, "stride")
    dils = _triple(dilation, "dilation")
    pads = _pad_pairs(padding)
    kern = (kd, kh, kw)
    spatial = x.data.shape[1:]
    out_ext = []
    for ax in range(3):
        eff = dils[ax] * (kern[ax] - 1) + 1
        padded = spatial[ax] + pads[ax][0] + pads[ax][1]
        o = (padded - eff) // strides[ax] + 1
        if padded < eff or o < 1:
            raise ConfigError(
                f"conv3d: axis {ax} extent {spatial[ax]} with padding {pads[ax]} "
                f"cannot fit kernel {kern[ax]} (dilation {dils[ax]})"
            )
        out_ext.append(o)
    do, ho, wo = out_ext

    xp = np.pad(x.data, ((0, 0),) + pads)
    win = np.lib.stride_tricks.sliding_window_view(
        xp, tuple(dils[a] * (kern[a] - 1) + 1 for a in range(3)), axis=(1, 2, 3)
    )
    win = win[
        :,
        :: strides[0],
        :: strides[1],
        :: strides[2],
        :: dils[0],
        :: dils[1],
        :: dils[2],
    ]
    # win: [C_in, do, ho, wo, kd, kh, kw] (a view; no copy)
    vg = win.reshape((groups, cin_g) + win.shape[1:])
    wg = weight.data.reshape(groups, cout // groups, cin_g, kd, kh, kw)
    out = np.einsum("goiabc,gizyxabc->gozyx", wg, vg, optimize=True)
    out = np.ascontiguousarray(out.reshape(cout, do, ho, wo))
    if bias is not None:
        _check_same_dtype(x, bias, "conv3d")
        if bias.data.shape != (cout,):
            raise ShapeError(
                f"conv3d: bias shape {bias.data.shape} != ({cout},)"
            )
        out += bias.data[:, None, None, None]

    def vjp(g):
        go = g.reshape(groups, cout // groups, do, ho, wo)
        gw = np.einsum("gozyx,gizyxabc->goiabc", go, vg, optimize=True)
        gxp = np.zeros_like(xp).reshape((groups, cin_g) + xp.shape[1:])
        for a in range(kd):
            z0 = a * dils[0]
            zs = slice(z0, z0 + strides[0] * (do - 1) + 1, strides[0])
            for b in range(kh):
                y0 = b * dils[1]
                ys = slice(y0, y0 + strides[1] * (ho - 1) + 1, strides[1])
                for c in range(kw):
                    x0 = c * dils[2]
                    xs = slice(x0, x0 + strides[2] * (wo - 1) + 1, strides[2])
                    gxp[:, :, zs, ys, xs] += np.einsum(
                        "gozyx,goi->gizyx", go, wg[:, :, :, a, b, c], optimize=True
                    )
        gxp = gxp.reshape(xp.shape)
        unpad = tuple(
            slice(lo, lo + ext) for (lo, _hi), ext in zip(pads, spatial)
        )
        gx = gxp[(slice(None),) + unpad]
        grads = [np.ascontiguousarray(gx), gw.reshape(weight.data.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, inputs, vjp)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------


def global_pool(a: Tensor, mode: str) -> Tensor:
    """Pool [C, D, H, W] to [C] by 'avg' or 'max' over the spatial axes."""
    if a.ndim != 4:
        raise ShapeError(f"global_pool expects [C,D,H,W], got {a.data.shape}")
    c = a.data.shape[0]
    flat = a.data.reshape(c, -1)
    if mode == "avg":
        out = flat.mean(axis=1)
        nvox = flat.shape[1]

        def vjp(g):
            return (np.broadcast_to(g[:, None] / nvox, flat.shape).reshape(a.data.shape).copy(),)

    elif mode == "max":
        idx = flat.argmax(axis=1)
        out = flat[np.arange(c), idx]

        def vjp(g):
            buf = np.zeros_like(flat)
            buf[np.arange(c), idx] = g
            return (buf.reshape(a.data.shape),)

    else:
        raise ConfigError(f"global_pool mode must be 'avg' or 'max', got {mode!r}")
    return make_op(out, (a,), vjp)


def _interp_indices(in_ext: int, factor: int, dtype):
    """Half-pixel-aligned source indices/weights for one upsampled axis."""
    scalar = np.dtype(dtype).type
    pos = (np.arange(in_ext * factor, dtype=dtype) + scalar(0.5)) / scalar(factor) - scalar(0.5)
    pos = np.clip(pos, 0.0, in_ext - 1)
    i0 = np.floor(pos).astype(np.intp)
    if in_ext > 1:
        i0 = np.minimum(i0, in_ext - 2)
    i1 = np.minimum(i0 + 1, in_ext - 1)
    w = (pos - i0).astype(dtype)
    return i0, i1, w


def upsample_trilinear(a: Tensor, factor) -> Tensor:
    """Upsample [C, D, H, W] by integer factors, half-pixel aligned.

    Factor 1 on an axis is the identity (bit-exact).
    """
    if a.ndim != 4:
        raise ShapeError(f"upsample_trilinear expects [C,D,H,W], got {a.data.shape}")
    factors = _triple(factor, "factor")
    if any(f < 1 for f in factors):
        raise ConfigError(f"upsample factors must be >= 1, got {factors}")
    if all(f == 1 for f in factors):
        return make_op(a.data.copy(), (a,), lambda g: (g,))
    dtype = a.data.dtype
    plans = []
    cur = a.data
    for ax, f in zip((1, 2, 3), factors):
        if f == 1:
            plans.append(None)
            continue
        i0, i1, w = _interp_indices(cur.shape[ax], f, dtype)
        wshape = [1, 1, 1, 1]
        wshape[ax] = w.size
        wb = w.reshape(wshape)
        cur = np.take(cur, i0, axis=ax) * (1.0 - wb) + np.take(cur, i1, axis=ax) * wb
        plans.append((ax, i0, i1, wb, cur.shape[ax] // f))
    out = cur

    def vjp(g):
        for plan in reversed(plans):
            if plan is None:
                continue
            ax, i0, i1, wb, in_ext = plan
            gm = np.moveaxis(g, ax, 0)
            wm = np.moveaxis(wb, ax, 0)
            buf = np.zeros((in_ext,) + gm.shape[1:], dtype=g.dtype)
            np.add.at(buf, i0, gm * (1.0 - wm))
            np.add.at(buf, i1, gm * wm)
            g = np.moveaxis(buf, 0, ax)
        return (g,)

    return make_op(out, (a,), vjp)
