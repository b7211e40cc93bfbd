"""Dense float64 tensors with a reverse-mode tape that can record its own backward pass.

Everything here is deliberately small: the encoders and the meta-learner only
need a handful of primitives, but they need gradients of gradients, so every
vector-Jacobian product is itself written in terms of recorded primitives.

Usage::

    with Tape() as tape:
        x = tape.watch(np.array([3.0]))
        y = (x * x).sum()
        (g,) = backward(y, [x], create_graph=True)   # 6
        (h,) = backward(g.sum(), [x])                # 2
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DetachedInputError, EmptyInputError, ShapeError, ValidationError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass(eq=False)
class Node:
    index: int
    tape: "Tape"
    parents: tuple["Tensor", ...]
    fn: Callable[..., np.ndarray] | None
    vjp: Callable[["Tensor"], Sequence["Tensor | None"]] | None
    value: np.ndarray


class Tape:
    """Append-only record of operations.  Nodes are numbered in creation order,
    so parents always carry a smaller index than their children."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.recording = False
        self._paused = 0

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        self.recording = True
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()
        self.recording = False

    @property
    def active(self) -> bool:
        return self.recording and self._paused == 0

    @contextmanager
    def paused(self) -> Iterator[None]:
        self._paused += 1
        try:
            yield
        finally:
            self._paused -= 1

    def watch(self, x: "Tensor | np.ndarray | float") -> "Tensor":
        """Return a fresh leaf tensor bound to this tape."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        data = np.array(data, dtype=np.float64)
        t = Tensor(data)
        t.node = self._append((), None, None, data)
        return t

    def _append(self, parents, fn, vjp, value) -> Node:
        node = Node(len(self.nodes), self, parents, fn, vjp, value)
        self.nodes.append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns values in node order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.fn is None:
                values.append(node.value)
            else:
                args = [values[p.node.index] if p.node is not None and p.node.tape is self else p.data
                        for p in node.parents]
                values.append(node.fn(*args))
        return values


class Tensor:
    """A float64 array plus an optional reference into the tape that produced it."""

    __slots__ = ("data", "node")
    __array_priority__ = 100

    def __init__(self, data, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node.index}"
        return f"Tensor({self.data!r}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        if isinstance(other, Tensor) and other.data.ndim == 0 and self.data.ndim > 0:
            return scale(self, other)
        return hadamard(self, _lift(other, self.shape))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != shape:
        arr = np.broadcast_to(arr, shape).copy()
    return Tensor(arr)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, parents: tuple[Tensor, ...], fn, vjp) -> Tensor:
    tape = _active_tape()
    out = Tensor(value)
    if tape is not None and tape.active and any(p.node is not None and p.node.tape is tape for p in parents):
        out.node = tape._append(parents, fn, vjp, out.data)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# deterministic dense products
# ---------------------------------------------------------------------------

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # spmm routes through this same kernel, which is what makes the two bit-identical
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  1-D operands are treated as a row (left) or column (right)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[1:])
    if b.data.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record(_mm(a.data, b.data), (a, b), _mm, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    fn = lambda x: np.ascontiguousarray(x.T)
    return _record(fn(a.data), (a,), fn, lambda g: (transpose(g),))


@dataclass(eq=False)
class SparseMatrix:
    """Coordinate-format matrix, entries sorted by (row, col), no duplicates."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (len(self.row_idx) == len(self.col_idx) == len(self.values)):
            raise ValidationError("sparse matrix: index and value arrays differ in length")
        if len(self.values):
            if self.row_idx.min() < 0 or self.row_idx.max() >= self.rows \
                    or self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise ValidationError("sparse matrix: index out of range")
            key = self.row_idx * self.cols + self.col_idx
            if np.any(np.diff(key) <= 0):
                raise ValidationError("sparse matrix: entries must be sorted by (row, col) without duplicates")

    @classmethod
    def from_entries(cls, rows: int, cols: int, entries) -> "SparseMatrix":
        entries = sorted(entries, key=lambda e: (e[0], e[1]))
        if not entries:
            return cls(rows, cols, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        r, c, v = zip(*entries)
        return cls(rows, cols, np.array(r), np.array(c), np.array(v, dtype=np.float64))

    @classmethod
    def from_dense(cls, m: np.ndarray) -> "SparseMatrix":
        r, c = np.nonzero(m)
        return cls(m.shape[0], m.shape[1], r, c, m[r, c])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row_idx, self.col_idx] = self.values
        return out

    def transpose(self) -> "SparseMatrix":
        order = np.lexsort((self.row_idx, self.col_idx))
        return SparseMatrix(self.cols, self.rows, self.col_idx[order], self.row_idx[order], self.values[order])

    def apply(self, d: np.ndarray) -> np.ndarray:
        if self._dense is None:
            self._dense = self.dense()
        return _mm(self._dense, d)


def spmm(s: SparseMatrix, d: Tensor) -> Tensor:
    """Sparse (constant) times dense; bit-identical to ``matmul(dense(s), d)``.

    Graphs here have tens of nodes, so the product runs on the cached dense
    form through the same kernel as :func:`matmul`.
    """
    d = as_tensor(d)
    if d.data.ndim != 2 or s.cols != d.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {s.shape} by {d.shape}")
    st = None

    def vjp(g):
        nonlocal st
        if st is None:
            st = s.transpose()
        return (spmm(st, g),)

    return _record(s.apply(d.data), (d,), s.apply, vjp)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), np.add, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), np.subtract, lambda g: (g, scale(g, -1.0)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    return _record(a.data * b.data, (a, b), np.multiply, lambda g: (hadamard(g, b), hadamard(g, a)))


def divide(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "divide")

    def vjp(g):
        gb = divide(hadamard(g, a), hadamard(b, b))
        return divide(g, b), scale(gb, -1.0)

    return _record(a.data / b.data, (a, b), np.divide, vjp)


def scale(a: Tensor, s: "float | Tensor") -> Tensor:
    """Multiply by a python float or by a 0-d tensor."""
    if not isinstance(s, Tensor):
        c = float(s)
        fn = lambda x: x * c
        return _record(a.data * c, (a,), fn, lambda g: (scale(g, c),))
    if s.data.ndim != 0:
        raise ShapeError("scale: factor must be a scalar")
    return _record(a.data * s.data, (a, s), np.multiply,
                   lambda g: (scale(g, s), reduce_sum(hadamard(g, a))))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    # derivative at exactly 0 is taken from the positive branch
    mask = np.where(a.data >= 0, 1.0, slope)
    fn = lambda x: np.where(x >= 0, x, slope * x)
    return _record(fn(a.data), (a,), fn, lambda g: (hadamard(g, Tensor(mask)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    holder: list[Tensor] = []

    def vjp(g):
        y = holder[0]
        return (hadamard(g, hadamard(y, sub(Tensor(np.ones(y.shape)), y))),)

    out = _record(_sigmoid(a.data), (a,), _sigmoid, vjp)
    holder.append(out)
    return out


def tanh(a: Tensor) -> Tensor:
    holder: list[Tensor] = []

    def vjp(g):
        y = holder[0]
        return (hadamard(g, sub(Tensor(np.ones(y.shape)), hadamard(y, y))),)

    out = _record(np.tanh(a.data), (a,), np.tanh, vjp)
    holder.append(out)
    return out


def elementwise(kind: str, a: Tensor, b=None, slope: float = 0.01) -> Tensor:
    """Dispatch helper over the pointwise primitives by name."""
    if kind == "add":
        return add(a, _lift(b, a.shape))
    if kind == "sub":
        return sub(a, _lift(b, a.shape))
    if kind == "hadamard":
        return hadamard(a, _lift(b, a.shape))
    if kind == "scale":
        return scale(a, b)
    if kind == "leaky_relu":
        return leaky_relu(a, slope if b is None else float(b))
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    old = a.shape
    fn = lambda x: x.reshape(shape)
    return _record(a.data.reshape(shape), (a,), fn, lambda g: (reshape(g, old),))


def take(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatter-adds."""
    shape = a.shape
    fn = lambda x: np.array(x[key])
    return _record(fn(a.data), (a,), fn, lambda g: (put(g, key, shape),))


def put(g: Tensor, key, shape) -> Tensor:
    """Zero tensor of ``shape`` with ``g`` scatter-added at ``key``; adjoint of :func:`take`."""

    def fn(x):
        out = np.zeros(shape)
        np.add.at(out, key, x)
        return out

    return _record(fn(g.data), (g,), fn, lambda h: (take(h, key),))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: {a.shape} and {b.shape}")
    k = a.shape[1]
    fn = lambda x, y: np.concatenate([x, y], axis=1)
    return _record(fn(a.data, b.data), (a, b), fn,
                   lambda g: (take(g, (slice(None), slice(0, k))), take(g, (slice(None), slice(k, None)))))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        fn = lambda x: np.array(x.sum())
    else:
        fn = lambda x: x.sum(axis=axis)
    return _record(fn(a.data), (a,), fn, lambda g: (broadcast(g, shape, axis),))


def broadcast(a: Tensor, shape, axis: int | None = None) -> Tensor:
    """Expand a reduced tensor back to ``shape``; adjoint of :func:`reduce_sum`."""
    shape = tuple(shape)
    if axis is None:
        fn = lambda x: np.full(shape, x)
    else:
        fn = lambda x: np.ascontiguousarray(np.broadcast_to(np.expand_dims(x, axis), shape))
    return _record(fn(a.data), (a,), fn, lambda g: (reduce_sum(g, axis),))


# ---------------------------------------------------------------------------
# losses and norms
# ---------------------------------------------------------------------------

def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(z: Tensor) -> Tensor:
    holder: list[Tensor] = []

    def vjp(g):
        s = holder[0]
        gs = hadamard(g, s)
        row = broadcast(reduce_sum(gs, 1), s.shape, 1)
        return (sub(gs, hadamard(s, row)),)

    out = _record(_softmax_np(z.data), (z,), _softmax_np, vjp)
    holder.append(out)
    return out


def softmax_cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Summed (not averaged) row-wise softmax cross-entropy against one-hot targets."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if logits.data.ndim != 2 or logits.shape[0] == 0 or logits.shape[1] == 0:
        raise EmptyInputError(f"cross-entropy needs a non-empty n x c matrix, got {logits.shape}")
    if t.shape != logits.shape:
        raise ShapeError(f"cross-entropy: targets {t.shape} vs logits {logits.shape}")

    def fn(z):
        m = z.max(axis=1, keepdims=True)
        logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        return np.array(-(t * logp).sum())

    return _record(fn(logits.data), (logits,), fn,
                   lambda g: (scale(sub(softmax_rows(logits), Tensor(t)), g),))


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Summed binary cross-entropy on logits, via the softplus form."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"sigmoid_bce: targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("sigmoid_bce: targets must be 0 or 1")

    def fn(z):
        return np.array((np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z)))).sum())

    return _record(fn(logits.data), (logits,), fn,
                   lambda g: (scale(sub(sigmoid(logits), Tensor(t)), g),))


def l2_norm(v: Tensor) -> Tensor:
    """Unsquared Euclidean norm; the gradient at the origin is the zero vector."""
    holder: list[Tensor] = []

    def vjp(g):
        n = holder[0]
        if n.data == 0.0:
            return (Tensor(np.zeros(v.shape)),)
        return (scale(v, divide(g, n)),)

    fn = lambda x: np.array(np.sqrt((x * x).sum()))
    out = _record(fn(v.data), (v,), fn, vjp)
    holder.append(out)
    return out


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward computation is itself recorded on the
    active tape, so the returned gradients can be differentiated again.
    Tensors on the tape that ``output`` does not depend on get zero gradients.
    """
    if output.data.ndim != 0:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    for w in wrt:
        if w.node is None:
            raise DetachedInputError("gradient requested for a tensor that is not on a tape")
    if output.node is None:
        return [Tensor(np.zeros(w.shape)) for w in wrt]
    tape = output.node.tape
    for w in wrt:
        if w.node.tape is not tape:
            raise DetachedInputError("gradient requested for a tensor recorded on a different tape")

    reachable: dict[int, Node] = {}
    stack = [output.node]
    while stack:
        node = stack.pop()
        if node.index in reachable:
            continue
        reachable[node.index] = node
        for p in node.parents:
            if p.node is not None and p.node.tape is tape and p.node.index not in reachable:
                stack.append(p.node)

    grads: dict[int, Tensor] = {output.node.index: Tensor(np.array(1.0))}
    wanted = {w.node.index for w in wrt}

    def run():
        for idx in sorted(reachable, reverse=True):
            node = reachable[idx]
            g = grads.get(idx)
            if g is None or node.vjp is None:
                continue
            if idx not in wanted:
                del grads[idx]
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.node is None or parent.node.tape is not tape:
                    continue
                j = parent.node.index
                grads[j] = pg if j not in grads else add(grads[j], pg)

    if create_graph:
        if not tape.active:
            raise ContractError("create_graph requires the tape to be recording")
        run()
    else:
        with tape.paused():
            run()

    out = []
    for w in wrt:
        g = grads.get(w.node.index)
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    return out


def grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Convenience: analytic gradient of scalar ``f`` at ``x``."""
    with Tape() as tape:
        xt = tape.watch(x)
        (g,) = backward(f(xt), [xt])
    return g.data


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Central differences with step 1e-6 * (1 + |x_i|)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        eps = 1e-6 * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_check(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    """Max componentwise relative error between the tape gradient and central differences."""
    return relative_error(grad(f, x), numeric_grad(f, x))


def hessian_vector_check(f: Callable[[Tensor], Tensor], x: np.ndarray, v: np.ndarray) -> float:
    """Compare d/dx <grad f(x), v> (taken through the recorded backward pass)
    with central differences of the analytic gradient along each coordinate."""
    v = np.asarray(v, dtype=np.float64)

    def directional(xt: Tensor) -> Tensor:
        with Tape() as inner:
            xi = inner.watch(xt.data)
            (g,) = backward(f(xi), [xi])
        return Tensor(np.array((g.data * v).sum()))

    with Tape() as tape:
        xt = tape.watch(x)
        (g,) = backward(f(xt), [xt], create_graph=True)
        (h,) = backward(reduce_sum(hadamard(g, Tensor(v))), [xt])
    return relative_error(h.data, numeric_grad(directional, x))
