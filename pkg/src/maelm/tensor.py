"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation returns a new :class:`Tensor` holding its value, the
parents it was computed from, and a closure that maps the output gradient
to parent gradients. :func:`backward` walks the tape in reverse
topological order from a scalar root.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TensorError(ValueError):
    """Base class for contract violations in tensor operations."""


class DimensionError(TensorError):
    pass


class DegenerateDimensionError(TensorError):
    pass


class EmptyMaskError(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return swap_last(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: flatten leading axes into rows
        lead = ad.shape[:-1]
        flat = ad.reshape(-1, ad.shape[-1])

        def back_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _make((flat @ bd).reshape(lead + (bd.shape[1],)), (a, b), back_flat)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def index(a: Tensor, key) -> Tensor:
    src = a.shape

    def back(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"ids outside table of {table.shape[0]} rows")
    src = table.shape

    def back(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, src[-1]))
        return (out,)

    return _make(table.data[ids], (table,), back)


def take_rows(x: Tensor, idx) -> Tensor:
    """Batched row gather: ``out[b, i] = x[b, idx[b, i]]`` for ``x`` of shape [B, m, d]."""
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(x.shape[0])[:, None]
    src = x.shape

    def back(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, (np.broadcast_to(b, idx.shape), idx), g)
        return (out,)

    return _make(x.data[b, idx], (x,), back)


# --------------------------------------------------------------------------
# fused neural-network primitives
# --------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DegenerateDimensionError("layer_norm needs a last axis of size >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from erf."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def cross_entropy_masked(logits: Tensor, targets, positions=None) -> Tensor:
    """Mean of ``-log softmax(logits[i])[target_i]`` over ``i`` in ``positions``.

    ``logits`` is [n, |V|]. ``targets`` aligns with ``positions`` (or with all
    rows when ``positions`` is None).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n = logits.shape[0]
    rows = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        raise EmptyMaskError("cross-entropy over an empty mask set is undefined")
    if targets.shape[0] != rows.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {rows.shape[0]} positions")
    if rows.min() < 0 or rows.max() >= n:
        raise DimensionError(f"positions outside [0, {n})")
    sel = logits.data[rows]
    z = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    k = np.arange(rows.size)
    loss = float(np.mean(lse - z[k, targets]))

    def back(g):
        probs = np.exp(z - lse[:, None])
        probs[k, targets] -= 1.0
        out = np.zeros_like(logits.data)
        np.add.at(out, rows, probs * (float(g) / rows.size))
        return (out,)

    return _make(np.array(loss), (logits,), back)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_leaves(root: Tensor) -> list[Tensor]:
    """Differentiable leaves reachable from ``root``."""
    return [t for t in _topo(root) if t._backward is None and t.requires_grad]


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every differentiable node reachable from ``root``.

    Returns a map from leaf name to gradient for named leaves.
    """
    if root.data.size != 1:
        raise TensorError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {t.name: t.grad for t in order if t._backward is None and t.name is not None}


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The error for each input is ``|analytic - numeric|_2 / max(|analytic|_2,
    |numeric|_2, 1e-8)``; the maximum over inputs is returned.
    """
    leaves = [Tensor(np.array(x, dtype=DTYPE), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    backward(out)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(leaf.data)
        base = [np.array(x, dtype=DTYPE) for x in inputs]
        flat = base[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = fn(*[Tensor(b) for b in base]).item()
            flat[j] = orig - step
            lo = fn(*[Tensor(b) for b in base]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (hi - lo) / (2.0 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
