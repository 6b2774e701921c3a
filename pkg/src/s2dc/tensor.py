"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Everything is 64-bit and define-by-run: operations executed inside a
``with GradTape() as tape:`` block are recorded, and ``tape.backward(loss)``
replays the records in reverse to accumulate gradients for every watched
leaf. Outside a tape, the same operations run as plain numpy and produce
constants. A tape is single-threaded; tensors that are not attached to a
tape are immutable and safe to share.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeMismatchError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape():
    """The innermost open tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``requires_grad`` marks a leaf whose gradient should be reported by
    ``backward``. Tensors produced by operations inside an open tape carry
    a reference to that tape; detached/constant tensors carry none.
    """

    __slots__ = ("data", "requires_grad", "tape", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values."""
        return Tensor(self.data.copy(), op="detach")

    def assign_(self, values) -> None:
        """Overwrite values in place. Only legal while no tape is open."""
        if active_tape() is not None:
            raise TapeError("in-place assignment while a tape is open")
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeMismatchError(
                f"assign_ expects shape {self.data.shape}, got {arr.shape}"
            )
        self.data[...] = arr

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{grad})"

    # arithmetic — definitions live at module level
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    @property
    def T(self):
        return transpose(self)


class _Record:
    __slots__ = ("out_id", "vjp")

    def __init__(self, out_id: int, vjp: Callable[[np.ndarray], Iterable]):
        self.out_id = out_id
        self.vjp = vjp


class GradTape:
    """Ordered, append-only record of operations for one forward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._watched: dict[int, Tensor] = {}
        self._closed = False

    def __enter__(self) -> "GradTape":
        if self._closed:
            raise TapeError("tape is closed: cannot re-enter after backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exit out of order")
        stack.pop()

    def watch(self, tensor: Tensor) -> None:
        """Register a leaf so backward reports its gradient (zero if unused)."""
        if not tensor.requires_grad:
            raise TapeError("watch expects a requires_grad tensor")
        self._watched[id(tensor)] = tensor

    def _record(self, out: Tensor, inputs: Sequence[Tensor],
                vjp: Callable[[np.ndarray], Iterable]) -> None:
        if self._closed:
            raise TapeError("tape is closed: recording after backward")
        for t in inputs:
            if t.requires_grad and t.tape is None:
                self._watched.setdefault(id(t), t)
        self._records.append(_Record(id(out), vjp))
        out.tape = self

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar loss for every watched leaf.

        Returns a mapping keyed by leaf Tensor identity; unused leaves map
        to zero tensors of matching shape.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise TapeError(f"backward expects a scalar loss, got shape "
                            f"{getattr(loss, 'shape', None)}")
        if loss.tape is not self:
            raise TapeError("loss is detached from this tape")
        self._closed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self._records):
            gout = grads.pop(record.out_id, None)
            if gout is None:
                continue
            for tensor, contrib in record.vjp(gout):
                tid = id(tensor)
                if tensor.requires_grad and tensor.tape is None:
                    # leaf reached by the sweep
                    self._watched.setdefault(tid, tensor)
                if tensor.tape is self or tensor.requires_grad:
                    acc = grads.get(tid)
                    grads[tid] = contrib if acc is None else acc + contrib
        out: dict[Tensor, Tensor] = {}
        for tid, leaf in self._watched.items():
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[leaf] = Tensor(g, op="grad")
        return out


def backward(loss: Tensor) -> dict:
    """Run the backward pass of the tape that produced ``loss``."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise TapeError("loss is detached: it was not produced on a tape")
    return loss.tape.backward(loss)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _tracked(*tensors: Tensor) -> bool:
    tape = active_tape()
    if tape is None:
        return False
    return any(t.requires_grad or t.tape is tape for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, vjp_a, vjp_b, name: str) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(fwd(a.data, b.data), op=name)
    if _tracked(a, b):
        def vjp(g):
            return (
                (a, _unbroadcast(vjp_a(g, a.data, b.data), a.data.shape)),
                (b, _unbroadcast(vjp_b(g, a.data, b.data), b.data.shape)),
            )
        active_tape()._record(out, (a, b), vjp)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y), "div")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul expects (m,k) @ (k,n), got {a.shape} @ {b.shape}"
        )
    out = Tensor(a.data @ b.data, op="matmul")
    if _tracked(a, b):
        def vjp(g):
            return ((a, g @ b.data.T), (b, a.data.T @ g))
        active_tape()._record(out, (a, b), vjp)
    return out


def _unary(a, fwd, vjp_fn, name: str) -> Tensor:
    a = _coerce(a)
    out = Tensor(fwd(a.data), op=name)
    if _tracked(a):
        def vjp(g):
            return ((a, vjp_fn(g, a.data, out.data)),)
        active_tape()._record(out, (a,), vjp)
    return out


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y, "exp")


def log(a) -> Tensor:
    """Natural log with the argument clamped to LOG_EPS to absorb underflow."""
    def fwd(x):
        return np.log(np.maximum(x, LOG_EPS))

    def vjp(g, x, y):
        return np.where(x > LOG_EPS, g / np.maximum(x, LOG_EPS), 0.0)

    return _unary(a, fwd, vjp, "log")


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda g, x, y: g * 0.5 / y, "sqrt")


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y), "tanh")


def power(a, exponent: float) -> Tensor:
    exponent = float(exponent)
    return _unary(a, lambda x: np.power(x, exponent),
                  lambda g, x, y: g * exponent * np.power(x, exponent - 1.0),
                  "power")


def transpose(a) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.T.copy(), op="transpose")
    if _tracked(a):
        def vjp(g):
            return ((a, g.T),)
        active_tape()._record(out, (a,), vjp)
    return out


def reshape(a, *shape) -> Tensor:
    a = _coerce(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape).copy(), op="reshape")
    if _tracked(a):
        def vjp(g):
            return ((a, g.reshape(a.data.shape)),)
        active_tape()._record(out, (a,), vjp)
    return out


def take(a, index) -> Tensor:
    a = _coerce(a)
    out = Tensor(np.array(a.data[index]), op="take")
    if _tracked(a):
        def vjp(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return ((a, full),)
        active_tape()._record(out, (a,), vjp)
    return out


def concatenate(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), op="concat")
    if _tracked(*parts):
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            pieces = []
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                pieces.append((p, g[tuple(sl)]))
            return pieces
        active_tape()._record(out, parts, vjp)
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), op="sum")
    if _tracked(a):
        def vjp(g):
            if axis is None:
                return ((a, np.broadcast_to(g, a.data.shape).copy()),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((a, np.broadcast_to(gg, a.data.shape).copy()),)
        active_tape()._record(out, (a,), vjp)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction; gradient splits evenly across tied maxima."""
    a = _coerce(a)
    out = Tensor(a.data.max(axis=axis, keepdims=keepdims), op="max")
    if _tracked(a):
        def vjp(g):
            full_max = a.data.max(axis=axis, keepdims=True)
            mask = (a.data == full_max).astype(np.float64)
            mask /= mask.sum(axis=axis, keepdims=True)
            if axis is None:
                return ((a, mask * g),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((a, mask * gg),)
        active_tape()._record(out, (a,), vjp)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, op="softmax")
    if _tracked(a):
        def vjp(g):
            inner = (g * y).sum(axis=axis, keepdims=True)
            return ((a, y * (g - inner)),)
        active_tape()._record(out, (a,), vjp)
    return out


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    val = np.log(s) + m
    out = Tensor(val if keepdims else np.squeeze(val, axis=axis), op="logsumexp")
    if _tracked(a):
        soft = e / s

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((a, soft * gg),)
        active_tape()._record(out, (a,), vjp)
    return out
