"""Small reverse-mode autodiff engine over float64 numpy arrays.

A graph is built implicitly while ops run and is consumed by a single call to
:meth:`Tensor.backward`. Reusing a consumed graph raises ``GraphError``.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping

import numpy as np

EPS_GUARD = 1e-12

_node_ids = itertools.count()


class GraphError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    """Raised when an op would produce a non-finite or undefined value."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = _op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph traversal ----------------------------------------------------
    def _topo(self) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); run a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo()
        if any(n._consumed for n in order):
            raise GraphError("part of this graph was consumed by an earlier backward(); run a new forward pass")
        grads: dict[int, np.ndarray] = {self.node_id: _as_array(grad).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if node._backward is not None:
                node._consumed = True
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient reaching op '{node.op or 'leaf'}'")
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


def _first_bad(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


# -- elementwise ops ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    small = np.abs(bd) < EPS_GUARD
    if np.any(small):
        raise NumericError(f"div: |denominator| < {EPS_GUARD:g} at index {_first_bad(np.atleast_1d(small))}")
    out = ad / bd
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"exp: overflow at index {_first_bad(np.atleast_1d(~np.isfinite(out)))}")
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = a.data <= 0
    if np.any(bad):
        raise NumericError(f"log: non-positive input at index {_first_bad(np.atleast_1d(bad))}")
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(a.data)
    if np.any(out < EPS_GUARD) and a.requires_grad:
        raise NumericError("sqrt: derivative undefined at zero")
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": lambda a, b=None: exp(a),
    "log": lambda a, b=None: log(a),
    "relu": lambda a, b=None: relu(a),
    "clamp": lambda a, b=(0.0, 1.0): clamp(a, *b),
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by op name: add, sub, mul, div, exp, log, relu, clamp."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if b is None:
        return fn(a)
    return fn(a, b)


# -- shape / reduction ops ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul",
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), "sum", back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), "take", back)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat",
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# -- normalized / probabilistic ops --------------------------------------------

def logsumexp(a, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis``; entries with ``where == False`` are excluded."""
    a = as_tensor(a)
    x = a.data if where is None else np.where(where, a.data, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("logsumexp: a row has no included entries")
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    weights = e / s
    return _make(out, (a,), "logsumexp", lambda g: (np.expand_dims(g, axis) * weights,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(v, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] < 1:
        raise ValueError("softmax needs at least one entry")
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (v,), "softmax",
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norms = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norms < EPS_GUARD):
        raise NumericError(f"l2_normalize: zero-norm vector at index {_first_bad(np.atleast_1d(norms < EPS_GUARD))}")
    return div(x, sqrt(tsum(mul(x, x), axis=axis, keepdims=True)))


def cosine_sim(u, v, axis: int = -1) -> Tensor:
    """Cosine similarity; for 2-d inputs it is computed row by row."""
    u, v = as_tensor(u), as_tensor(v)
    _check_broadcast("cosine_sim", u.data, v.data)
    for name, t in (("first", u), ("second", v)):
        norms = np.sqrt((t.data ** 2).sum(axis=axis))
        if np.any(norms < EPS_GUARD):
            raise NumericError(f"cosine_sim: {name} input has zero norm")
    return tsum(mul(l2_normalize(u, axis), l2_normalize(v, axis)), axis=axis)


def kl_divergence(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) over probability vectors, with ``0 * log(0 / q) = 0``.

    2-d inputs give one divergence per row.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or np.any(np.abs(t.data.sum(axis=axis) - 1.0) > 1e-6):
            raise ValueError(f"kl_divergence: {name} is not a probability vector")
    support = p.data > 0
    tiny = support & (q.data < EPS_GUARD)
    if np.any(tiny):
        raise NumericError(f"kl_divergence: q below {EPS_GUARD:g} where p > 0 at index {_first_bad(tiny)}")
    safe_p = np.where(support, p.data, 1.0)
    safe_q = np.where(support, q.data, 1.0)
    ratio = np.log(safe_p / safe_q)
    out = np.where(support, p.data * ratio, 0.0).sum(axis=axis)

    def back(g):
        g = np.expand_dims(g, axis)
        gp = np.where(support, ratio + 1.0, 0.0) * g if p.requires_grad else None
        gq = np.where(support, -p.data / safe_q, 0.0) * g if q.requires_grad else None
        return gp, gq

    return _make(out, (p, q), "kl", back)


def softmax_kl(a_logits, b_logits, axis: int = -1) -> Tensor:
    """KL(softmax(a) || softmax(b)) evaluated in log space (no underflow guard needed)."""
    la = log_softmax(a_logits, axis)
    lb = log_softmax(b_logits, axis)
    pa = exp(la)
    return tsum(mul(pa, sub(la, lb)), axis=axis)


# -- finite-difference checking -------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               richardson: bool = False) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated after each in-place perturbation of a parameter entry.
    Relative error uses ``|a - n| / max(|a|, |n|, 1e-6)``; with ``max_entries`` a
    random subset of entries per parameter is probed.

    ``richardson`` combines the differences at ``step`` and ``step / 2`` into a
    fourth-order estimate. Losses that sum many terms need this: at a small step
    roundoff swamps tiny gradient entries, at a large one truncation error does.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NumericError("grad_check: f must return a finite scalar")
    out.backward()
    worst = 0.0
    for name, t in params.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            diffs = []
            for h in ((step, step / 2) if richardson else (step,)):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"grad_check: non-finite value perturbing {name}[{i}]")
                diffs.append((up - down) / (2 * h))
            numeric = (4 * diffs[1] - diffs[0]) / 3 if richardson else diffs[0]
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
