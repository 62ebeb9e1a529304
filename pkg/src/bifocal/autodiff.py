"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient.  Outside a tape context nothing is recorded, which
doubles as the inference (no-grad) mode.

Broadcasting is deliberately narrow: two operands must have the same shape,
or one of them must be a scalar, or one shape must be a trailing suffix of the
other (a bias vector added to every row of a matrix).  Anything else goes
through :func:`expand` explicitly.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_check",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "getitem",
    "take_rows",
    "tsum",
    "mean",
    "reshape",
    "expand",
    "dot",
]

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not fit an operation's signature."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_inputs", "_backward", "name")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.id = next(_ids)
        self._inputs: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> Tape:
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out._inputs = inputs
                out._backward = fn
                tape.nodes.append(out)
                break
    return out


class _SliceGrad:
    """Gradient that is nonzero only at ``idx`` of an array of ``shape``."""

    __slots__ = ("idx", "g", "shape", "basic")

    def __init__(self, idx, g: np.ndarray, shape: tuple, basic: bool):
        self.idx, self.g, self.shape, self.basic = idx, g, shape, basic

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        self.add_into(out)
        return out

    def add_into(self, out: np.ndarray) -> None:
        if self.basic:
            out[self.idx] += self.g
        else:
            np.add.at(out, self.idx, self.g)


def _accumulate(store: dict, owned: set, key: int, gi) -> None:
    cur = store.get(key)
    if isinstance(gi, _SliceGrad):
        if cur is None:
            store[key] = gi.dense()
            owned.add(key)
            return
        if key not in owned:
            cur = store[key] = cur.copy()
            owned.add(key)
        gi.add_into(cur)
    elif cur is None:
        store[key] = gi
    elif key in owned:
        cur += gi
    else:
        store[key] = cur + gi
        owned.add(key)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) backwards through ``tape``.

    Returns a map from tensor id to gradient array holding every
    ``requires_grad`` leaf that the loss depends on.  Gradients from several
    consumers are summed.  Each leaf's ``.grad`` is overwritten with its
    gradient.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        warnings.warn("loss does not depend on any tensor requiring grad; gradients are zero",
                      RuntimeWarning, stacklevel=2)
        return {}
    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    owned: set[int] = set()
    leaves: dict[int, np.ndarray] = {}
    leaf_refs: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[loss.id] = pending.pop(loss.id)
        leaf_refs[loss.id] = loss
    for node in reversed(tape.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        in_grads = node._backward(g)
        for inp, gi in zip(node._inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                leaf_refs[inp.id] = inp
                _accumulate(leaves, owned, inp.id, gi)
            else:
                _accumulate(pending, owned, inp.id, gi)
    for key, t in leaf_refs.items():
        t.grad = leaves[key]
    return leaves


# -- broadcasting ---------------------------------------------------------

def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 and a.ndim <= 1 or b.data.size == 1 and b.ndim <= 1:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.shape[-1:] != (1,)):
        return g.sum().reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:
        g = g.sum(axis=tuple(i for i, n in enumerate(shape) if n == 1), keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary("mul", a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary("div", a, b)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def neg(a) -> Tensor:
    a = _coerce(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # tanh form is overflow-free and gives exactly 0.5 at 0
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, n) or (k,)."""
    a, b = _coerce(a), _coerce(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    k = a.shape[-1]

    def fn(g):
        if b.ndim == 2:
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1]) if b.requires_grad else None
        else:
            ga = g[..., None] * b.data if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def dot(a, b) -> Tensor:
    """Inner product along the last axis: (..., d), (..., d) -> (...)."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    out = np.einsum("...d,...d->...", a.data, b.data)

    def fn(g):
        g = np.asarray(g)[..., None]
        return g * b.data, g * a.data

    return _result(out, (a, b), fn)


# -- reductions and normalisers ------------------------------------------

def tsum(a, axis: int | None = None) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis)
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(out), (a,), fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = _coerce(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("softmax mask", x.shape, mask.shape)
    return np.where(mask, x, -np.inf)


def softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    a = _coerce(a)
    z = _masked(a.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), fn)


def log_softmax(a, mask=None) -> Tensor:
    a = _coerce(a)
    z = _masked(a.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        p = np.exp(out)
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), fn)


# -- structural -----------------------------------------------------------

def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(_coerce(p) for p in parts)
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or p.shape[:ax] + p.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", *(q.shape for q in parts))
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, parts, fn)


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(_coerce(p) for p in parts)
    if any(p.shape != parts[0].shape for p in parts):
        raise ShapeError("stack", *(p.shape for p in parts))
    out = np.stack([p.data for p in parts], axis=axis)
    ax = axis % out.ndim

    def fn(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _result(out, parts, fn)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = _coerce(a)
    out = a.data[idx]
    basic = _is_basic(idx)

    shape = a.shape

    def fn(g):
        return (_SliceGrad(idx, g, shape, basic),)

    return _result(np.array(out, copy=True), (a,), fn)


def take_rows(table, ids, frozen_row: int | None = None) -> Tensor:
    """Gather rows of a 2-D table.  ``frozen_row`` never receives gradient."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take_rows", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def fn(g):
        flat_ids = ids.reshape(-1)
        g = g.reshape(-1, table.shape[1])
        if frozen_row is not None:
            g = np.where((flat_ids == frozen_row)[:, None], 0.0, g)
        return (_SliceGrad(flat_ids, g, table.shape, False),)

    return _result(out, (table,), fn)


def reshape(a, shape: tuple) -> Tensor:
    a = _coerce(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand(a, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    a = _coerce(a)
    ax = axis % (a.ndim + 1)
    shape = a.shape[:ax] + (n,) + a.shape[ax:]
    out = np.broadcast_to(np.expand_dims(a.data, ax), shape)
    return _result(out, (a,), lambda g: (g.sum(axis=ax),))


# -- verification ---------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-4,
                      coords: Iterable[int] | None = None) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences.

    The error per coordinate is ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    Only meaningful where ``f`` is differentiable; kinks such as ``|x|`` at 0
    are outside the supported input class.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise ShapeError("finite_diff_check (f must be scalar)", out.shape)
    grads = backward(tape, out)
    analytic = grads.get(x.id, np.zeros_like(x0)).reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for step in (eps, -eps):
            probe = flat.copy()
            probe[i] += step
            v = float(f(Tensor(probe.reshape(x0.shape))).data)
            if not np.isfinite(v):
                raise ValueError(f"f is not finite at coordinate {i} perturbed by {step}")
            vals.append(v)
        cd = (vals[0] - vals[1]) / (2 * eps)
        a = analytic[i]
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
        worst = max(worst, err)
    return worst
