"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable op builds its output through :func:`_result`, which
records the parent tensors and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks the recorded graph in reverse
topological order and sums gradients into leaf tensors.

Broadcasting is deliberately narrow: binary ops accept equal shapes, a
scalar, or an operand whose shape is a trailing suffix of the other's (the
bias/gain case).  Anything else is a :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPES = {"single": np.float32, "double": np.float64}

_grad_enabled = True
check_finite = True


def dtype_for(precision: str):
    try:
        return DTYPES[precision]
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (evaluation, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _finite(arr: np.ndarray, op: str) -> None:
    if check_finite and not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    _finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf in the graph."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = gp if key not in pending else pending[key] + gp


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:  # scalar operand
        g = g.sum().reshape(shape)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def grad_fn(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result(out, (x,), grad_fn, "silu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; they receive no gradient."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        mask = np.broadcast_to(mask, x.shape)
    out = np.where(mask, x.data.dtype.type(value), x.data)
    return _result(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),), "masked_fill")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    src = x.shape
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain ``[k, n]`` matrix shared across ``a``'s leading
    batch axes, or carries exactly the same batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if shared:
        # one 2-D GEMM is much faster than numpy's stacked matmul
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def grad_fn(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _result(out, (a, b), grad_fn, "matmul")

    out = ad @ bd

    def grad_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(out, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# lookups


def _check_ids(ids: np.ndarray, vocab: int) -> np.ndarray:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"token ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    return ids


def _scatter_rows(shape, ids: np.ndarray, rows: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros(shape, dtype=dtype)
    np.add.at(out, ids.reshape(-1), rows.reshape(-1, shape[1]))
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` ([V, d]) for integer ``ids`` of any shape."""
    ids = _check_ids(ids, table.shape[0])
    out = table.data[ids]
    return _result(out, (table,), lambda g: (_scatter_rows(table.shape, ids, g, g.dtype),), "embedding")


def embedding_bag_mean(table: Tensor, ids) -> Tensor:
    """Mean embedding over the last axis of ``ids`` ([..., s] -> [..., d]).

    The running sum is kept in float64 and cast back to the table's dtype
    after division, so single-precision runs do not lose low bits while
    summing the bag.
    """
    ids = _check_ids(ids, table.shape[0])
    s = ids.shape[-1]
    acc = table.data[ids[..., 0]].astype(np.float64)
    for i in range(1, s):
        acc = acc + table.data[ids[..., i]].astype(np.float64)
    out = (acc / s).astype(table.dtype)

    def grad_fn(g):
        share = np.repeat((g / s)[..., None, :], s, axis=-2)
        return (_scatter_rows(table.shape, ids, share, g.dtype),)

    return _result(out, (table,), grad_fn, "embedding_bag_mean")


def take_last(x: Tensor, idx) -> Tensor:
    """Gather ``x[..., idx[..., j]]`` along the last axis.

    ``idx`` has shape ``x.shape[:-1] + (k,)``.  Repeated indices receive
    summed gradients.
    """
    idx = np.asarray(idx)
    if idx.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"take_last: index shape {idx.shape} does not match {x.shape}")
    idx = _check_ids(idx, x.shape[-1])
    out = np.take_along_axis(x.data, idx, axis=-1)

    def grad_fn(g):
        v = x.shape[-1]
        gx = np.zeros((int(np.prod(x.shape[:-1], dtype=np.int64)), v), dtype=g.dtype)
        rows = np.arange(gx.shape[0])[:, None]
        np.add.at(gx, (rows, idx.reshape(gx.shape[0], -1)), g.reshape(gx.shape[0], -1))
        return (gx.reshape(x.shape),)

    return _result(out, (x,), grad_fn, "take_last")


# ---------------------------------------------------------------------------
# normalisers


def _stable_lse(z: np.ndarray, mask: Optional[np.ndarray] = None):
    if mask is not None:
        zm = np.where(mask, z, -np.inf)
        m = zm.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(zm - m), 0)
    else:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
    tot = e.sum(axis=-1, keepdims=True)
    return m, e, tot


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _finite(x.data, "softmax input")
    _, e, tot = _stable_lse(x.data)
    p = e / tot

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), grad_fn, "softmax")


def logsumexp(x: Tensor, mask=None) -> Tensor:
    """log sum exp over the last axis, optionally restricted to ``mask``.

    Rows with an empty mask are a contract violation: their value is -inf.
    """
    _finite(x.data, "logsumexp input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"logsumexp: mask shape {mask.shape} != {x.shape}")
        if not mask.any(axis=-1).all():
            raise ContractError("logsumexp: a row has no unmasked entries")
    m, e, tot = _stable_lse(x.data, mask)
    out = (m + np.log(tot))[..., 0]
    p = e / tot
    return _result(out, (x,), lambda g: (g[..., None] * p,), "logsumexp")


def softmax_logsumexp(z: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(softmax(z), logsumexp(z))`` over the last axis.

    Both outputs are differentiable.  The max is subtracted before
    exponentiating, so large logits do not overflow.
    """
    _finite(z.data, "softmax_logsumexp input")
    m, e, tot = _stable_lse(z.data)
    p = e / tot
    lse = (m + np.log(tot))[..., 0]

    def probs_grad(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return (_result(p, (z,), probs_grad, "softmax"),
            _result(lse, (z,), lambda g: (g[..., None] * p,), "logsumexp"))


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / rms(x) * weight over the last axis."""
    if weight.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm: weight {weight.shape} vs input {x.shape}")
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * wd

    def grad_fn(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gh = g * wd
        gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _result(out, (x, weight), grad_fn, "rmsnorm")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding (rotate-half form) on the last axis.

    ``cos`` and ``sin`` are ``[positions, head_dim]`` tables broadcast over
    ``x``'s leading axes; ``x`` is ``[..., positions, head_dim]``.
    """
    xd = x.data
    half = xd.shape[-1] // 2
    if xd.shape[-1] % 2 or cos.shape != xd.shape[-2:]:
        raise DimensionError(f"rope: table {cos.shape} vs input {xd.shape}")

    def rot(u):
        return np.concatenate([-u[..., half:], u[..., :half]], axis=-1)

    def rot_t(u):
        return np.concatenate([u[..., half:], -u[..., :half]], axis=-1)

    out = xd * cos + rot(xd) * sin
    return _result(out, (x,), lambda g: (g * cos + rot_t(g * sin),), "rope")
