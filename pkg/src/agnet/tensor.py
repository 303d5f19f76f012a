"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`GradTape` is active are recorded on that tape; ``tape.backward(loss)``
replays the records in exact reverse execution order and leaves the
accumulated gradient of each leaf (parameter) tensor in its ``.grad`` field.
Outside a tape, operations run as plain numpy forward computations.

Verification code runs everything in float64 (the default dtype); training
may switch to float32 via :func:`set_default_dtype` or per-tensor dtypes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

DEFAULT_DTYPE = np.float64

# When True, every completed operation validates that its output is finite.
# Training always validates the loss scalar regardless of this flag.
FINITE_CHECKS = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from non-float data."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise NumericsError(f"unsupported tensor dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


def set_finite_checks(enabled: bool) -> None:
    global FINITE_CHECKS
    FINITE_CHECKS = bool(enabled)


class Tensor:
    """A dense n-dimensional array of real values, row-major."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        if FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericsError("tensor contains non-finite values")

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    """Create a leaf tensor that will receive gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------

# Per-thread stack: one training step runs on one logical thread, while
# parallel evaluation threads each see their own (empty) stack.
_TAPES = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = _TAPES.stack = []
    return stack


class GradTape:
    """Ordered record of executed differentiable operations.

    One tape serves one backward pass: enter the context, run the forward
    computation, call :meth:`backward` on the scalar loss. Each leaf tensor
    with ``requires_grad`` that participated in the computation ends up with
    exactly one accumulated gradient array in ``.grad``. Single-writer: a
    tape must not be shared across threads.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._created: set[int] = set()
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def watch(self, t: Tensor) -> None:
        self._watched[id(t)] = t

    def _note(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._created:
                self._watched[id(t)] = t
        self._created.add(id(out))
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) into every watched leaf's ``.grad``."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericsError("backward called on a non-finite loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, dt in zip(inputs, vjp(g)):
                if dt is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = dt if acc is None else acc + dt
        for key, leaf in self._watched.items():
            g = grads.get(key)
            # note: ascontiguousarray would promote 0-d grads to shape (1,)
            leaf.grad = None if g is None else np.asarray(g, dtype=leaf.dtype)


def _record(out: Tensor, inputs: tuple[Tensor, ...], make_vjp: Callable[[], Callable]) -> Tensor:
    """Attach a backward rule to ``out`` if a tape is active and needed."""
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1]._note(out, inputs, make_vjp())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Elementwise and arithmetic operations
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda: lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda: lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def make():
        mask = x.data > 0
        return lambda g: (g * mask,)

    return _record(out, (x,), make)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid exp overflow for large |x|.
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    return _record(out, (x,), lambda: lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, (x,), lambda: lambda g: (g * (1.0 - t * t),))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda: lambda g: (g / x.data,))


def maximum_const(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient is zero where clamped."""
    out = Tensor(np.maximum(x.data, floor))

    def make():
        mask = x.data > floor
        return lambda g: (g * mask,)

    return _record(out, (x,), make)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``: outputs in (0, 1], summing to 1."""
    d = x.data
    if not -d.ndim <= axis < d.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {d.shape}")
    shifted = d - d.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    s = ex / ex.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def make():
        def vjp(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)
        return vjp

    return _record(out, (x,), make)


# --------------------------------------------------------------------------
# Reductions and shape manipulation
# --------------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def tsum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def make():
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, x.shape).copy(),)
        return vjp

    return _record(out, (x,), make)


def tmean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def make():
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, x.shape) / count,)
        return vjp

    return _record(out, (x,), make)


def tmax(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Max-reduce; the gradient flows to the first maximal element."""
    axes = _norm_axes(axes, x.ndim)
    out_data = x.data.max(axis=axes, keepdims=keepdims)
    out = Tensor(out_data)

    def make():
        # Collapse the reduced axes to the front so argmax picks the first
        # maximal element in row-major order (ties break to lowest index).
        kept = tuple(a for a in range(x.ndim) if a not in axes)
        perm = axes + kept
        moved = np.transpose(x.data, perm).reshape(-1, int(np.prod([x.shape[a] for a in kept], dtype=np.int64)) or 1)
        winners = moved.argmax(axis=0)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            g_kept = np.transpose(g, perm).reshape(-1)
            dmoved = np.zeros_like(moved)
            dmoved[winners, np.arange(moved.shape[1])] = g_kept
            dperm = dmoved.reshape([x.shape[a] for a in perm])
            return (np.transpose(dperm, np.argsort(perm)),)
        return vjp

    return _record(out, (x,), make)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda: lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = Tensor(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (x,), lambda: lambda g: (np.transpose(g, inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def make():
        def vjp(g):
            pieces = np.split(g, len(ts), axis=axis)
            return tuple(p.squeeze(axis=axis) for p in pieces)
        return vjp

    return _record(out, tuple(ts), make)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))

    def make():
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))
        return vjp

    return _record(out, tuple(ts), make)


def take(x: Tensor, index: int) -> Tensor:
    """Pick one element of a rank-1 tensor as a scalar."""
    if x.ndim != 1:
        raise ShapeError(f"take expects a rank-1 tensor, got {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"index {index} out of range for length {x.shape[0]}")
    out = Tensor(x.data[index])

    def make():
        def vjp(g):
            dx = np.zeros_like(x.data)
            dx[index] = g
            return (dx,)
        return vjp

    return _record(out, (x,), make)


# --------------------------------------------------------------------------
# Convolution and bilinear sampling
# --------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an HxWxCin map with a (kh,kw,Cin,Cout) kernel.

    Output extent per spatial dim is floor((n + 2p - k)/stride) + 1.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects HWC input and 4-D kernel, got {x.shape}, {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d bad geometry: stride={stride}, padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    acc = np.zeros((ho, wo, cout), dtype=x.data.dtype)
    for dy in range(kh):
        for dx in range(kw):
            window = xp[dy:dy + ho * stride:stride, dx:dx + wo * stride:stride, :]
            acc += window @ kernel.data[dy, dx]
    out = Tensor(acc)

    def make():
        def vjp(g):
            dk = np.zeros_like(kernel.data)
            dxp = np.zeros_like(xp)
            gflat = g.reshape(-1, cout)
            for dy in range(kh):
                for dx in range(kw):
                    window = xp[dy:dy + ho * stride:stride, dx:dx + wo * stride:stride, :]
                    dk[dy, dx] = window.reshape(-1, cin).T @ gflat
                    dxp[dy:dy + ho * stride:stride, dx:dx + wo * stride:stride, :] += g @ kernel.data[dy, dx].T
            dx_full = dxp[padding:padding + h, padding:padding + w, :] if padding else dxp
            return (dx_full, dk)
        return vjp

    return _record(out, (x, kernel), make)


def grid_sample_bilinear(fmap: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Sample an HxWxC map at continuous pixel-center coordinates.

    ``ys``/``xs`` hold row/column positions in pixel-center space (cell i has
    center i); they are data, not differentiable inputs. Out-of-range
    positions clamp to the border. Returns shape ys.shape + (C,).
    """
    h, w, c = fmap.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    flat = fmap.data.reshape(-1, c)
    i00 = (y0 * w + x0).ravel()
    i01 = (y0 * w + x1).ravel()
    i10 = (y1 * w + x0).ravel()
    i11 = (y1 * w + x1).ravel()
    weights = (w00.ravel(), w01.ravel(), w10.ravel(), w11.ravel())
    sampled = sum(wk[:, None] * flat[ik] for wk, ik in zip(weights, (i00, i01, i10, i11)))
    out = Tensor(sampled.reshape(ys.shape + (c,)).astype(fmap.dtype, copy=False))

    def make():
        def vjp(g):
            gflat = g.reshape(-1, c)
            dflat = np.zeros_like(flat)
            for wk, ik in zip(weights, (i00, i01, i10, i11)):
                np.add.at(dflat, ik, wk[:, None] * gflat)
            return (dflat.reshape(fmap.shape),)
        return vjp

    return _record(out, (fmap,), make)
