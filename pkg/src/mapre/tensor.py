"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations executed inside ``with Tape() as tape:`` are recorded; outside a
tape they only compute values, which is what evaluation code relies on.

>>> x = Tensor([2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     y = dot(x, x)
>>> backward(tape, y)
>>> x.grad
array([4., 6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mapre import kernels

PRIMITIVES = frozenset(
    {
        "matmul",
        "add",
        "sub",
        "mul",
        "scale",
        "concat",
        "take_rows",
        "embedding",
        "mean",
        "layer_norm",
        "gelu",
        "softmax",
        "log_softmax",
        "cross_entropy",
        "dot",
        "transpose",
    }
)


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __float__(self) -> float:
        return self.item()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(shape):
    raise ValueError(f"tensor of shape {shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def current_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of primitive applications.

    Recording order is execution order, so replaying it backwards is a valid
    reverse topological order of the DAG.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def record(self, op, inputs, out, backward_fn) -> None:
        if op not in PRIMITIVES:
            raise ValueError(f"{op!r} is not a registered primitive")
        self.records.append(Record(op, tuple(inputs), out, backward_fn))
        self._outputs.add(id(out))


class no_grad:
    """Suspend recording, e.g. for evaluation inside a training tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape.record(op, inputs, out, backward_fn)
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor.

    Leaf gradients add onto an existing ``grad`` buffer; call
    :func:`zero_grad` between optimizer steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root not in tape:
        raise ValueError("root was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        rec.out.grad = g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
                if k not in tape._outputs:
                    leaves[k] = t
    for k, t in leaves.items():
        g = grads[k]
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D; use dot for vectors")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ _swap(bd), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(ad) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", data, ts, bw)


def _gather(op: str, x, idx) -> Tensor:
    x = as_tensor(x)
    if isinstance(idx, slice):
        data = x.data[idx]
    else:
        idx = np.asarray(idx, dtype=np.intp)
        n = x.shape[0]
        if idx.size and (idx.min() < -n or idx.max() >= n):
            raise IndexError(f"row index out of range for {n} rows")
        data = x.data[idx]
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        if isinstance(idx, slice) or idx.ndim == 0:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit(op, data, (x,), bw)


def take_rows(x, idx) -> Tensor:
    """Rows of ``x`` along axis 0; ``idx`` may be an int, an index array or a slice."""
    return _gather("take_rows", x, idx)


def embedding(table, ids) -> Tensor:
    return _gather("embedding", table, ids)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.size // max(data.size, 1) if x.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", data, (x,), bw)


def sum_(x, axis=None) -> Tensor:
    """Sum as ``mean`` followed by ``scale``; not a separate primitive."""
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(mean(x, axis=axis), float(n))


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_rows(_rows(x.data), gain.data, bias.data, eps)
    gd = gain.data

    def bw(g):
        dx, dg, db = kernels.layer_norm_rows_backward(_rows(g), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _emit("layer_norm", y.reshape(shape), (x, gain, bias), bw)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = np.ascontiguousarray(x.data)
    return _emit("gelu", kernels.gelu(xd), (x,), lambda g: (kernels.gelu_backward(xd, np.ascontiguousarray(g)),))


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    y = kernels.softmax_rows(_rows(x.data))

    def bw(g):
        return (kernels.softmax_rows_backward(y, _rows(g)).reshape(shape),)

    return _emit("softmax", y.reshape(shape), (x,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    y = kernels.log_softmax_rows(_rows(x.data))

    def bw(g):
        return (kernels.log_softmax_rows_backward(y, _rows(g)).reshape(shape),)

    return _emit("log_softmax", y.reshape(shape), (x,), bw)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects [rows, classes] logits")
    t = np.asarray(targets, dtype=np.intp)
    r, c = logits.shape
    if t.shape != (r,):
        raise ValueError(f"expected {r} targets, got shape {t.shape}")
    if r and (t.min() < 0 or t.max() >= c):
        raise IndexError("target class out of range")
    logp = kernels.log_softmax_rows(np.ascontiguousarray(logits.data))
    rows = np.arange(r)
    loss = -logp[rows, t].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / r),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bw)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("dot", np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError("transpose needs at least 2 axes")
    return _emit("transpose", _swap(x.data), (x,), lambda g: (_swap(g),))
