"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that belong to
it.  Tensors created without a tape are constants: operations on them run
eagerly and nothing is recorded, which is what inference uses.

    >>> tape = Tape()
    >>> x = tape.leaf([[2.0]])
    >>> y = tape.leaf([[3.0]])
    >>> grads = tape.backward(mul(x, y))
    >>> float(grads[x.node].data[0, 0]), float(grads[y.node].data[0, 0])
    (3.0, 2.0)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError, ShapeError

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"


@dataclass
class _Record:
    kind: str
    inputs: tuple
    backward: Callable | None
    shape: tuple = ()


class Tape:
    """Ordered log of primitive applications; node ids are positions in it."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self):
        return len(self.records)

    def __bool__(self):
        return True

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, len(self.records))
        self.records.append(_Record("leaf", (), None, t.shape))
        return t

    def _push(self, kind, inputs, out, backward) -> Tensor:
        self.records.append(_Record(kind, tuple(inputs), backward))
        return Tensor(out, self, len(self.records) - 1)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of ``loss`` with respect to every leaf on this tape.

        Leaves that ``loss`` does not depend on get a zero tensor of their
        own shape.
        """
        if loss.tape is not self or loss.node is None:
            raise ContractViolation("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.records)
        grads[loss.node] = np.ones(loss.shape)
        for node in range(loss.node, -1, -1):
            g = grads[node]
            rec = self.records[node]
            if g is None or rec.backward is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if inp is None or gi is None:
                    continue
                if grads[inp] is None:
                    grads[inp] = gi.copy()
                else:
                    grads[inp] = grads[inp] + gi
        out = {}
        for node, rec in enumerate(self.records):
            if rec.kind != "leaf":
                continue
            g = grads[node]
            out[node] = Tensor(np.zeros(rec.shape) if g is None else g)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{kind} produced a non-finite value")


def _emit(kind, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    _check_finite(kind, out)
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ContractViolation(f"{kind}: inputs belong to different tapes")
    (tape,) = tapes.values()
    ids = [t.node if t.tape is not None else None for t in inputs]
    return tape._push(kind, ids, out, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def total(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def row_softmax(a, causal: bool = False) -> Tensor:
    """Softmax along each row.

    With ``causal`` the input must be square and entry (t, s) is forced to
    exactly zero for s > t.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("row_softmax", a.shape)
    z = a.data
    if causal:
        n, m = z.shape
        if n != m:
            raise ShapeError("row_softmax(causal)", a.shape)
        keep = np.tril(np.ones((n, n), dtype=bool))
        shifted = np.where(keep, z - np.where(keep, z, -np.inf).max(axis=1, keepdims=True), 0.0)
        e = np.where(keep, np.exp(shifted), 0.0)
    else:
        e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", (a,), y, back)


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; clamped entries get zero gradient."""
    a = _as_tensor(a)
    x = a.data
    if floor > 0.0:
        live = x > floor
        safe = np.where(live, x, floor)
    else:
        if np.any(x <= 0.0):
            raise NumericError("log of a non-positive value")
        live = np.ones(x.shape, dtype=bool)
        safe = x
    return _emit("log", (a,), np.log(safe), lambda g: (np.where(live, g / safe, 0.0),))


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    th = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1.0 + th)

    def back(g):
        dx = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * dx,)

    return _emit("gelu", (a,), y, back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (np.where(pos, g, 0.0),))


def activation(a, kind: str = "gelu") -> Tensor:
    if kind == "gelu":
        return gelu(a)
    if kind == "relu":
        return relu(a)
    raise ContractViolation(f"unknown activation {kind!r}")


def layer_norm(x, gain, offset, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise every column of a (d, n) tensor, then apply gain/offset of length d."""
    x, gain, offset = _as_tensor(x), _as_tensor(gain), _as_tensor(offset)
    if x.data.ndim != 2:
        raise ShapeError("layer_norm", x.shape)
    d = x.shape[0]
    if gain.shape != (d,) or offset.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, offset.shape)
    X = x.data
    mu = X.mean(axis=0, keepdims=True)
    xc = X - mu
    var = (xc**2).mean(axis=0, keepdims=True)
    _check_finite("layer_norm variance", var)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data[:, None]
    y = xhat * G + offset.data[:, None]

    def back(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=0, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        return dx, (g * xhat).sum(axis=1), g.sum(axis=1)

    return _emit("layer_norm", (x, gain, offset), y, back)


def embedding_lookup(table, ids) -> Tensor:
    """Columns ``table[:, ids]`` of a (d, N) table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or ids.ndim != 1:
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[1]):
        raise ContractViolation(f"embedding_lookup: id out of range for table {table.shape}")
    shape = table.shape

    def back(g):
        gt = np.zeros((shape[1], shape[0]))
        np.add.at(gt, ids, g.T)
        return (gt.T,)

    return _emit("embedding_lookup", (table,), table.data[:, ids], back)


def concat_columns(*parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts) or len({p.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_columns", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_columns", parts, np.concatenate([p.data for p in parts], axis=1), back)


def index(a, rows, cols) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` into a vector."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("index", a.shape, rows.shape, cols.shape)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]
                      or cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ContractViolation(f"index: position out of range for shape {a.shape}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _emit("index", (a,), a.data[rows, cols], back)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "transpose": transpose,
    "sum": total,
    "row_softmax": row_softmax,
    "log": log,
    "relu_or_gelu": activation,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "concat_columns": concat_columns,
    "index": index,
}


def apply_primitive(op: str, *inputs, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractViolation(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


def backward(loss: Tensor) -> dict[int, Tensor]:
    if loss.tape is None:
        raise ContractViolation("loss is not attached to a tape")
    return loss.tape.backward(loss)
