"""Dense float tensors with a reverse-mode gradient tape.

Values live in numpy arrays (float32 by default; float64 is used as a
shadow precision for finite-difference checks). Operations record onto
the innermost active ``Tape``; ``backward`` walks the tape in reverse
creation order, which is a valid reverse-topological order because the
tape is append-only.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Node:
    """One recorded operation: input node ids plus a local gradient rule."""

    __slots__ = ("op", "inputs", "shape", "vjp", "leaf")

    def __init__(self, op, inputs, shape, vjp, leaf=None):
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.vjp = vjp      # callable(upstream) -> tuple of input grads
        self.leaf = leaf    # Tensor, for parameter leaves only


class Tape:
    """Append-only operation record; use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[int, ...], shape, vjp) -> int:
        self.nodes.append(Node(op, inputs, shape, vjp))
        return len(self.nodes) - 1

    def leaf_id(self, t: "Tensor") -> int:
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            self.nodes.append(Node("leaf", (), t.data.shape, None, leaf=t))
            nid = len(self.nodes) - 1
            self._leaf_ids[id(t)] = nid
        return nid


class Tensor:
    """A dense float array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.tape: Tape | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar (definitions below) ----------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node_of(tape: Tape | None, t: Tensor) -> int | None:
    """Node id of ``t`` on ``tape``, registering parameter leaves lazily."""
    if tape is None:
        return None
    if t.tape is tape and t.node is not None:
        return t.node
    if t.requires_grad:
        nid = tape.leaf_id(t)
        t.tape = tape
        t.node = nid
        return nid
    return None


def _record(out: Tensor, op: str, pairs: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Attach ``out`` to the active tape if any input is tracked.

    ``pairs`` holds (input tensor, grad_fn) where grad_fn maps the upstream
    gradient to that input's gradient contribution.
    """
    tape = active_tape()
    if tape is None:
        return out
    tracked = [(nid, fn) for t, fn in pairs if (nid := _node_of(tape, t)) is not None]
    if not tracked:
        return out
    ids = tuple(nid for nid, _ in tracked)
    fns = tuple(fn for _, fn in tracked)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    out.node = tape.record(op, ids, out.data.shape, vjp)
    out.tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    out = Tensor(a.data + b.data)
    return _record(out, "add", [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    out = Tensor(a.data - b.data)
    return _record(out, "sub", [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    out = Tensor(a.data * b.data)
    return _record(out, "mul", [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    out = Tensor(a.data / b.data)
    return _record(out, "div", [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ])


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    return _record(out, "neg", [(x, lambda g: -g)])


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = Tensor(x.data ** p)
    return _record(out, "pow", [(x, lambda g: g * p * x.data ** (p - 1.0))])


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y)
    return _record(out, "sqrt", [(x, lambda g: g * 0.5 / y)])


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return _record(out, "exp", [(x, lambda g: g * y)])


def tlog(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log requires strictly positive input")
    out = Tensor(np.log(x.data))
    return _record(out, "log", [(x, lambda g: g / x.data)])


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    return _record(out, "relu", [(x, lambda g: g * (x.data > 0))])


LEAKY_RELU_SLOPE = 0.01


def leaky_relu(x: Tensor, slope: float = LEAKY_RELU_SLOPE) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    return _record(out, "leaky_relu",
                   [(x, lambda g: g * np.where(x.data > 0, 1.0, slope))])


def sigmoid(x: Tensor) -> Tensor:
    # stable for large |x|: route through exp of a negative argument
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    y = y.astype(d.dtype, copy=False)
    out = Tensor(y)
    return _record(out, "sigmoid", [(x, lambda g: g * y * (1.0 - y))])


_UNARY = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "exp": texp,
    "log": tlog,
    "neg": neg,
}


def apply_unary(kind: str, x: Tensor) -> Tensor:
    """Dispatch an elementwise op by name: relu|leaky_relu|sigmoid|exp|log|neg."""
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ContractError(f"unknown unary op {kind!r}") from None
    return fn(x)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)
    return _record(out, "clamp", [(x, lambda g: g * inside)])


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, "reshape", [(x, lambda g: g.reshape(x.data.shape))])


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _record(out, "transpose", [(x, lambda g: g.transpose(inv))])


def select(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Integer indexing along leading axes, e.g. x[b, h] -> trailing slice."""
    out = Tensor(x.data[index])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return full

    return _record(out, "select", [(x, grad_fn)])


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    pairs = []
    for i, t in enumerate(tensors):
        pairs.append((t, lambda g, i=i: np.take(g, i, axis=axis)))
    return _record(out, "stack", pairs)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return full

    return _record(out, "embedding", [(table, grad_fn)])


# -- reductions ------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    return _record(out, "sum", [
        (x, lambda g: _expand_reduced(g, x.data.shape, axis, keepdims))
    ])


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- matrix product ----------------------------------------------------------


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from None
    out = Tensor(a.data @ b.data)
    return _record(out, "matmul", [
        (a, lambda g: _unbroadcast(g @ _swap_last(b.data), a.data.shape)),
        (b, lambda g: _unbroadcast(_swap_last(a.data) @ g, b.data.shape)),
    ])


# -- softmax family -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    d = x.data
    if not np.all(np.isfinite(d)):
        # -inf-style masking is done with large negative floats upstream
        raise NumericError("softmax input contains NaN/Inf")
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (g - dot) * y

    return _record(out, "softmax", [(x, grad_fn)])


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if not np.all(np.isfinite(d)):
        raise NumericError("log_softmax input contains NaN/Inf")
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    sm = np.exp(y)

    def grad_fn(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _record(out, "log_softmax", [(x, grad_fn)])


# -- gradient reversal ---------------------------------------------------------

GRL_SCALE = 1.0


def gradient_reversal(x: Tensor) -> Tensor:
    """Identity forward; multiplies the upstream gradient by -1 on the way back."""
    out = Tensor(x.data)
    return _record(out, "grl", [(x, lambda g: -GRL_SCALE * g)])


# -- backward pass ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into the ``grad`` of reachable leaves.

    ``loss`` must be a scalar recorded on a tape. Leaf gradients add onto
    any existing ``grad`` buffers (clear them between steps).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise ContractError("loss is not recorded on an active tape")
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones_like(loss.data)
    for nid in range(loss.node, -1, -1):
        g = grads[nid]
        grads[nid] = None
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.leaf is not None:
            t = node.leaf
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for iid, gi in zip(node.inputs, node.vjp(g)):
            if grads[iid] is None:
                grads[iid] = gi
            else:
                grads[iid] = grads[iid] + gi


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
