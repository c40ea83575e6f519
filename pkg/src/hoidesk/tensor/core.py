"""Dense tensors with tape-based reverse-mode autodiff over numpy arrays.

Broadcasting is restricted on purpose: a binary op accepts equal shapes, a
python/0-d scalar, or an operand whose shape is a suffix of the other's
(bias over leading dims). Anything else raises ``ShapeMismatch``.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DetachedTensor, NotScalar, ShapeMismatch, ZeroNorm

_DEFAULT_DTYPE = np.dtype(np.float64)
_seq = itertools.count()
_state = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data), copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(self, o)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(as_tensor(o, like=self), self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(self, o)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(as_tensor(o, like=self), self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def relu(self): return relu(self)
    def sigmoid(self): return sigmoid(self)

    def backward(self) -> None:
        backward(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return _DEFAULT_DTYPE


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.name = ""
    out._op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple
    output: int


class ComputationTape:
    """Ordered op records reachable from an output, in forward order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    @property
    def records(self) -> list[OpRecord]:
        return [OpRecord(t._op, tuple(p._seq for p in t._parents), t._seq) for t in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor that feeds ``loss``."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedTensor("loss is not connected to any tensor requiring grad")
    tape = ComputationTape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# shape helpers


def _check_bcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeMismatch(f"{op}: shapes {a} and {b} are not suffix-compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_bcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_bcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_bcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_bcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_bcast(a.shape, b.shape, "maximum")
    take_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_reduce_to(g * take_a, sa), _reduce_to(g * ~take_a, sb)), "maximum")


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_bcast(a.shape, b.shape, "minimum")
    take_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_reduce_to(g * take_a, sa), _reduce_to(g * ~take_a, sb)), "minimum")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        mask &= ad >= lo
    if hi is not None:
        mask &= ad <= hi
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()) if g.size == 1 else g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def expand_leading(a: Tensor, lead: tuple) -> Tensor:
    """Broadcast ``a`` to ``lead + a.shape``; gradient sums over the new dims."""
    lead = tuple(lead)
    n = len(lead)
    data = np.broadcast_to(a.data, lead + a.shape).copy()
    return _make(data, (a,), lambda g: (g.sum(axis=tuple(range(n))) if n else g,), "expand")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a 2-D ``b`` (shared over a's leading dims) or equal-rank batched operands."""
    a, b = _binary_operands(a, b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    else:
        raise ShapeMismatch(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# normalisation and activations over an axis


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise ZeroNorm(f"slice norm below {eps} in l2_normalize")
    out = a.data / norm
    return _make(out, (a,), lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,), "l2norm")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data
    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)
    feat = xd.shape[-1]

    def bw(g):
        gx = g * gd if gd is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gamma is not None:
            res.append((g * xhat).reshape(-1, feat).sum(axis=0))
        if beta is not None:
            res.append(g.reshape(-1, feat).sum(axis=0))
        return tuple(res)

    return _make(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(x: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeMismatch(f"bce: {x.shape} vs {t.shape}")
    xd = x.data
    out = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    p = _sigmoid_np(xd)
    return _make(out, (x,), lambda g: (g * (p - t),), "bce_logits")


def binary_cross_entropy(p: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Elementwise BCE on probabilities."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ShapeMismatch(f"bce: {p.shape} vs {t.shape}")
    pd = np.clip(p.data, eps, 1.0 - eps)
    out = -(t * np.log(pd) + (1.0 - t) * np.log(1.0 - pd))
    return _make(out, (p,), lambda g: (g * (pd - t) / (pd * (1.0 - pd)),), "bce")


def cross_entropy(logits: Tensor, target: np.ndarray, class_weight: np.ndarray | None = None) -> Tensor:
    """Weighted mean cross-entropy over rows of ``logits`` (N, C)."""
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or target.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, target {target.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(target)), target))
    if class_weight is None:
        return -mean(picked)
    w = np.asarray(class_weight, dtype=logits.dtype)[target]
    return -(sum_(picked * Tensor(w, dtype=logits.dtype)) * (1.0 / w.sum()))


def sigmoid_focal_loss(logits: Tensor, targets, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Elementwise focal loss on logits with multi-hot targets."""
    t = np.asarray(targets, dtype=logits.dtype)
    p = sigmoid(logits)
    ce = bce_with_logits(logits, t)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = Tensor(alpha * t + (1.0 - alpha) * (1.0 - t), dtype=logits.dtype)
    return ce * power(1.0 - p_t, gamma) * alpha_t


# ---------------------------------------------------------------------------
# selection


def topk_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of a 1-D array; ties go to the lower index."""
    x = np.asarray(x)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(x.size), -x))
    return np.sort(order[:k])


def topk_select(a: Tensor, k: int) -> Tensor:
    """Keep the k largest entries along the last axis at their values, zero the rest."""
    mask = np.zeros(a.shape, dtype=bool)
    flat = a.data.reshape(-1, a.shape[-1])
    mview = mask.reshape(-1, a.shape[-1])
    for r in range(flat.shape[0]):
        mview[r, topk_indices(flat[r], k)] = True
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "topk")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
