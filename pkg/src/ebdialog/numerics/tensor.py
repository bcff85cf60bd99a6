"""Tape-based reverse-mode autodiff over numpy arrays.

Storage precision is float32 unless switched with :func:`precision`;
reductions (softmax normalizers, layer-norm moments, losses, KL sums)
accumulate in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from ..variational import sigmoid_array, softplus_array


class ShapeError(ValueError):
    pass


_STATE = {"dtype": np.dtype(np.float32), "grad": True}


def default_dtype() -> np.dtype:
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch storage precision, e.g. ``with precision(np.float64):``."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _STATE["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # sugar used by tests and small scripts
    def __add__(self, other):
        return add(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents: Sequence[Tensor], backward, op: str, dtype=None) -> Tensor:
    out = Tensor(out_data, dtype=dtype)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale", dtype=a.data.dtype)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    k = math.sqrt(2.0 / math.pi)
    xd = x.data
    inner = k * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record(out, (x,), backward, "gelu")


def softplus(x: Tensor) -> Tensor:
    out = softplus_array(x.data)
    return _record(out, (x,), lambda g: (g * sigmoid_array(x.data.astype(np.float64)),), "softplus")


def reparameterize(mu: Tensor, rho: Tensor, eps: np.ndarray) -> Tensor:
    """w = mu + softplus(rho) * eps with eps held fixed."""
    if mu.shape != rho.shape or mu.shape != np.shape(eps):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {rho.shape}, {np.shape(eps)} differ")
    rho64 = rho.data.astype(np.float64)
    eps64 = np.asarray(eps, dtype=np.float64)
    out = mu.data.astype(np.float64) + softplus_array(rho64) * eps64

    def backward(g):
        return g, g * eps64 * sigmoid_array(rho64)

    return _record(out, (mu, rho), backward, "reparameterize")


def kl_gaussian_sum(mu: Tensor, rho: Tensor, prior_mean: np.ndarray, prior_sigma) -> Tensor:
    """Sum over all scalars of KL(N(mu, softplus(rho)^2) || N(prior_mean, prior_sigma^2))."""
    mu64 = mu.data.astype(np.float64)
    rho64 = rho.data.astype(np.float64)
    ps = np.asarray(prior_sigma, dtype=np.float64)
    sq = softplus_array(rho64)
    diff = mu64 - np.asarray(prior_mean, dtype=np.float64)
    total = np.sum(np.log(ps / sq) + (sq * sq + diff * diff) / (2.0 * ps * ps) - 0.5)

    def backward(g):
        g = float(g)
        dmu = g * diff / (ps * ps)
        dsigma = -1.0 / sq + sq / (ps * ps)
        return dmu, g * dsigma * sigmoid_array(rho64)

    return _record(np.float64(total), (mu, rho), backward, "kl_gaussian_sum", dtype=np.float64)


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select one position (int) or a slice along ``axis``."""
    key = [slice(None)] * a.data.ndim
    key[axis] = index
    key = tuple(key)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(out, (a,), backward, "take")


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {weight.shape[0]})")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record(weight.data[ids], (weight,), backward, "embedding_lookup")


def causal_mask_fill(scores: Tensor, fill: float = -1e9) -> Tensor:
    """Replace entries above the diagonal of the last two axes with ``fill``."""
    t, s = scores.shape[-2], scores.shape[-1]
    mask = np.triu(np.ones((t, s), dtype=bool), k=1)
    out = np.where(mask, np.asarray(fill, dtype=scores.data.dtype), scores.data)
    return _record(out, (scores,), lambda g: (np.where(mask, 0.0, g),), "causal_mask_fill")


# ---------------------------------------------------------------- normalizers

def softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = (e / z).astype(xd.dtype)

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64)
        return ((y * (g - dot)).astype(xd.dtype),)

    return _record(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        g64 = g.astype(np.float64)
        gx = g64 * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgamma = (g64 * xhat).sum(axis=lead)
        dbeta = g64.sum(axis=lead)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v).astype(np.float64)
    tgt = targets.reshape(-1)
    keep = tgt != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target is ignored")
    if np.any(tgt[keep] < 0) or np.any(tgt[keep] >= v):
        raise ShapeError(f"cross_entropy: target ids outside [0, {v})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, tgt[rows]].sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[rows, tgt[rows]] -= 1.0
        grad[~keep] = 0.0
        grad *= float(g) / count
        return (grad.reshape(logits.shape),)

    return _record(np.float64(loss), (logits,), backward, "cross_entropy", dtype=np.float64)


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` for named leaves.

    With ``params`` the result has one entry per name (zeros for leaves the
    loss does not reach); otherwise every named leaf reached is returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data, dtype=np.float64)
        for node in reversed(_topological(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            if node._parents:
                del grads[id(node)]
    if params is not None:
        return {
            name: np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=t.data.dtype).reshape(t.shape)
            for name, t in params.items()
        }
    return {
        n.name: np.asarray(g, dtype=n.data.dtype).reshape(n.shape)
        for n in _leaves(loss)
        if n.name is not None and (g := grads.get(id(n))) is not None
    }


def _leaves(root: Tensor) -> list[Tensor]:
    return [n for n in _topological(root) if not n._parents]
