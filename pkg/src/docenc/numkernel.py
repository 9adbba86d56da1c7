"""Differentiable f32 numeric primitives with reverse-mode gradients.

Everything downstream (encoders, losses, merging) is built from the ops in
this module. Gradients are checked against central finite differences via
``grad_check``, which stays independent of the analytic path it verifies.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import (
    CheckpointIncompatibilityError,
    ClassRangeError,
    DimensionError,
    EvaluationError,
)

__all__ = [
    "Tensor",
    "ParamStore",
    "Rng",
    "matmul",
    "layer_norm",
    "softmax",
    "gelu",
    "concat",
    "gather_rows",
    "scatter_rows",
    "select",
    "stack_scalars",
    "minimum",
    "maximum",
    "mse",
    "smooth_l1",
    "cross_entropy",
    "grad_check",
]


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Dense f32 array with an optional gradient slot.

    A Tensor remembers the ops that produced it so that ``backward`` can
    run reverse-mode accumulation. Data is immutable by convention except
    for explicit in-place training updates owned by one training loop.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn=None):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autograd -----------------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(np.float32, copy=False)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accum(_as_f32(grad))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accum(-g)
        return Tensor(-self.data, parents=(self,), backward_fn=bw)

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor(out_data, parents=(self, other), backward_fn=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * _wrap(other) ** -1.0

    def __rtruediv__(self, other):
        return _wrap(other) * self ** -1.0

    def __pow__(self, exponent: float):
        e = float(exponent)
        out_data = self.data ** np.float32(e)

        def bw(g):
            self._accum(g * e * self.data ** np.float32(e - 1.0))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            self._accum(g.reshape(src_shape))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bw(g):
            self._accum(g.transpose(inv))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)
        src_shape = self.shape

        def bw(g):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, src_shape).astype(np.float32))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities --------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self._accum(g * out_data)

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def log(self):
        out_data = np.log(self.data)

        def bw(g):
            self._accum(g / self.data)

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g):
            self._accum(g * (1.0 - out_data * out_data))

        return Tensor(out_data, parents=(self,), backward_fn=bw)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor(out_data, parents=(self,), backward_fn=bw)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# free-function ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradients for both inputs.

    Supports 1-D/2-D operands with numpy semantics plus batched 3-D × 3-D.
    """
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError("matmul requires at least 1-D operands")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise DimensionError(f"matmul batch dimensions disagree: {ad.shape} x {bd.shape}")
    out_data = np.matmul(ad, bd).astype(np.float32)

    def bw(g):
        g = np.asarray(g, dtype=np.float32)
        if a.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                ga = g * bd
            elif ad.ndim == 1:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            elif bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if g.ndim else np.outer(g, bd)
                ga = ga.reshape(ad.shape)
            else:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            a._accum(_unbroadcast(ga.astype(np.float32), a.shape))
        if b.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                gb = g * ad
            elif bd.ndim == 1:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            elif ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            b._accum(_unbroadcast(gb.astype(np.float32), b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gain + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accum((out_data * (g - dot)).astype(np.float32))

    return Tensor(out_data, parents=(x,), backward_fn=bw)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = _wrap(x)
    xd = x.data
    inner = _GELU_C * (xd + np.float32(0.044715) * xd ** 3)
    t = np.tanh(inner)
    out_data = (0.5 * xd * (1.0 + t)).astype(np.float32)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * np.float32(0.044715) * xd ** 2)
        dt = (1.0 - t * t) * dinner
        x._accum((g * (0.5 * (1.0 + t) + 0.5 * xd * dt)).astype(np.float32))

    return Tensor(out_data, parents=(x,), backward_fn=bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece.astype(np.float32))

    return Tensor(out_data, parents=tuple(ts), backward_fn=bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D (or 1-D) tensor by integer index."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def bw(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g.astype(np.float32))
        x._accum(acc)

    return Tensor(out_data, parents=(x,), backward_fn=bw)


def scatter_rows(rows: Tensor, idx, fill: Tensor, n: int) -> Tensor:
    """Place ``rows`` at positions ``idx`` of an n-row output; every other
    row is a broadcast copy of the 1-D ``fill`` vector."""
    rows, fill = _wrap(rows), _wrap(fill)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.tile(fill.data, (n, 1)).astype(np.float32)
    out_data[idx] = rows.data
    hole = np.ones(n, dtype=bool)
    hole[idx] = False

    def bw(g):
        g = np.asarray(g, dtype=np.float32)
        if rows.requires_grad:
            rows._accum(g[idx])
        if fill.requires_grad:
            fill._accum(g[hole].sum(axis=0))

    return Tensor(out_data, parents=(rows, fill), backward_fn=bw)


def select(x: Tensor, index: int) -> Tensor:
    """Scalar element of a 1-D tensor, differentiable."""
    x = _wrap(x)
    out_data = x.data[index]

    def bw(g):
        acc = np.zeros_like(x.data)
        acc[index] = g
        x._accum(acc)

    return Tensor(out_data, parents=(x,), backward_fn=bw)


def stack_scalars(parts: Iterable[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor."""
    return concat([p.reshape(1) for p in parts], axis=0)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data  # subgradient routes ties to a
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(take_a, g, 0.0).astype(np.float32), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(take_a, 0.0, g).astype(np.float32), b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(take_a, g, 0.0).astype(np.float32), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(take_a, 0.0, g).astype(np.float32), b.shape))

    return Tensor(out_data, parents=(a, b), backward_fn=bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; symmetric and differentiable
    w.r.t. both arguments."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Huber loss with transition at |d| = 1, averaged over elements."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    small = np.abs(d) < 1.0
    per_elem = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    out_data = np.float32(per_elem.mean(dtype=np.float64))
    n = d.size

    def bw(g):
        dd = np.where(small, d, np.sign(d)).astype(np.float32) / n
        if pred.requires_grad:
            pred._accum(g * dd)
        if target.requires_grad:
            target._accum(-g * dd)

    return Tensor(out_data, parents=(pred, target), backward_fn=bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Softmax cross-entropy, mean over positions; ``targets`` are class
    indices in [0, K)."""
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    ld = logits.data.reshape(-1, logits.shape[-1])
    n, k = ld.shape
    if t.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} positions but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= k):
        bad = int(t[(t < 0) | (t >= k)][0])
        raise ClassRangeError(f"target class {bad} outside [0, {k})")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + ld.max(axis=1)
    out_data = np.float32((lse - ld[np.arange(n), t]).mean(dtype=np.float64))

    def bw(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        logits._accum((g * p / n).reshape(logits.shape).astype(np.float32))

    return Tensor(out_data, parents=(logits,), backward_fn=bw)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
               h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    The finite-difference side never touches the autograd machinery of the
    function under test beyond evaluating it, so it is an independent oracle.
    """
    x0 = _as_f32(x.data if isinstance(x, Tensor) else x)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("non-finite function value in grad_check")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        xp = flat.copy(); xp[i] += h
        xm = flat.copy(); xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).data
        fm = f(Tensor(xm.reshape(x0.shape))).data
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise EvaluationError("non-finite function value in grad_check")
        numeric[i] = (float(fp) - float(fm)) / (2.0 * h)

    a = analytic.reshape(-1).astype(np.float64)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# parameter store / rng
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor map representing one checkpoint.

    Iteration order is lexicographic; entry shapes are fixed once set.
    """

    def __init__(self, entries: dict[str, Tensor] | None = None,
                 metadata: dict[str, str] | None = None):
        self._entries: dict[str, Tensor] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        for name, t in (entries or {}).items():
            self[name] = t

    def __setitem__(self, name: str, value: Tensor) -> None:
        value = _wrap(value)
        if name in self._entries and self._entries[name].shape != value.shape:
            raise CheckpointIncompatibilityError(
                f"parameter {name!r}: shape {self._entries[name].shape} is fixed, "
                f"got {value.shape}")
        self._entries[name] = value

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._entries:
            raise CheckpointIncompatibilityError(f"missing parameter {name!r}")
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def tensors(self) -> list[Tensor]:
        return [self._entries[n] for n in self.names()]

    def copy(self, requires_grad: bool | None = None) -> "ParamStore":
        out = ParamStore(metadata=dict(self.metadata))
        for name, t in self.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data.copy(), requires_grad=rg)
        return out

    def filtered(self, predicate: Callable[[str], bool]) -> "ParamStore":
        out = ParamStore(metadata=dict(self.metadata))
        for name, t in self.items():
            if predicate(name):
                out[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out

    def sha256(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        for k in sorted(self.metadata):
            h.update(k.encode())
            h.update(self.metadata[k].encode())
        return h.hexdigest()

    @property
    def frozen(self) -> bool:
        return self.metadata.get("frozen") == "true"

    def freeze(self) -> "ParamStore":
        self.metadata["frozen"] = "true"
        for t in self._entries.values():
            t.requires_grad = False
            t._parents = ()
            t._backward_fn = None
        return self


class Rng:
    """Deterministic random generator (PCG64); same seed, same sequence."""

    ALGORITHM = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(np.float32)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def child(self, label: str) -> "Rng":
        return Rng(derive_seed(self.seed, label))


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed from a parent seed and a stage label."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
