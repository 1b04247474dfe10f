"""Reverse-mode differentiable primitives over float64 numpy arrays.

Every primitive accepts either plain arrays or :class:`Var` nodes.  When no
input is a ``Var`` the primitive returns a plain array and records nothing,
so the same model code serves both taped training and cheap inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

LOG_EPS = 1e-12


class DivergenceError(FloatingPointError):
    """Raised when an optimizer sees a non-finite gradient or loss."""


class Var:
    """A node of the gradient tape: a value plus how to push gradients back."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every upstream Var."""
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if isinstance(parent, Var) and id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        # order is a post-order DFS, so reversed it is a valid reverse topological order
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if isinstance(parent, Var) and g is not None:
                    parent.grad = g if parent.grad is None else parent.grad + g


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _emit(value, inputs: tuple, vjp: Callable):
    if any(isinstance(x, Var) for x in inputs):
        return Var(value, inputs, vjp)
    return value


# ---------------------------------------------------------------- primitives


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    return _emit(av + bv, (a, b), lambda g: (g, g))


def scale(x, c: float):
    """Multiply by a constant scalar."""
    return _emit(c * value_of(x), (x,), lambda g: (c * g,))


def add_bias(x, b):
    xv, bv = value_of(x), value_of(b)
    if xv.ndim != 2 or bv.shape != (xv.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {xv.shape} + {bv.shape}")
    return _emit(xv + bv, (x, b), lambda g: (g, g.sum(axis=0)))


def relu(x):
    xv = value_of(x)
    on = xv > 0
    return _emit(np.where(on, xv, 0.0), (x,), lambda g: (g * on,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = _sigmoid(value_of(x))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def row_scale(x, s):
    """Scale row ``i`` of ``x`` by ``s[i]``."""
    xv, sv = value_of(x), value_of(s)
    if xv.ndim != 2 or sv.shape != (xv.shape[0],):
        raise ValueError(f"row_scale shape mismatch: {xv.shape} by {sv.shape}")
    return _emit(xv * sv[:, None], (x, s), lambda g: (g * sv[:, None], (g * xv).sum(axis=1)))


def neighbor_aggregate(x, adjacency: sparse.spmatrix, self_weight: float = 1.0):
    """Return ``self_weight * x + A @ x`` for a constant sparse adjacency ``A``."""
    xv = value_of(x)
    if adjacency.shape != (xv.shape[0], xv.shape[0]):
        raise ValueError("adjacency does not match row count")
    at = adjacency.T.tocsr()
    return _emit(self_weight * xv + adjacency @ xv, (x,), lambda g: (self_weight * g + at @ g,))


def _check_ranges(ranges: np.ndarray, n: int) -> np.ndarray:
    ranges = np.asarray(ranges, dtype=np.int64).reshape(-1, 2)
    if len(ranges) and (ranges[:, 0].min() < 0 or ranges[:, 1].max() > n or np.any(ranges[:, 1] <= ranges[:, 0])):
        raise ValueError("row ranges must be non-empty and inside the matrix")
    return ranges


def sum_rows(x, ranges):
    """Sum rows ``[start, stop)`` for each range; returns ``(len(ranges), cols)``."""
    xv = value_of(x)
    ranges = _check_ranges(ranges, xv.shape[0])
    out = np.stack([xv[a:b].sum(axis=0) for a, b in ranges])

    def vjp(g):
        gx = np.zeros_like(xv)
        for i, (a, b) in enumerate(ranges):
            gx[a:b] = g[i]
        return (gx,)

    return _emit(out, (x,), vjp)


def mean_rows(x, ranges):
    xv = value_of(x)
    ranges = _check_ranges(ranges, xv.shape[0])
    counts = (ranges[:, 1] - ranges[:, 0]).astype(np.float64)
    out = np.stack([xv[a:b].mean(axis=0) for a, b in ranges])

    def vjp(g):
        gx = np.zeros_like(xv)
        for i, (a, b) in enumerate(ranges):
            gx[a:b] = g[i] / counts[i]
        return (gx,)

    return _emit(out, (x,), vjp)


def take_row(x, i: int):
    """Row ``i`` of a 2-D array as a vector."""
    xv = value_of(x)

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[i] = g
        return (gx,)

    return _emit(xv[i].copy(), (x,), vjp)


def sum_all(x):
    xv = value_of(x)
    return _emit(np.asarray(xv.sum()), (x,), lambda g: (np.full_like(xv, float(g)),))


def weighted_sum(x, w):
    """``sum(x * w)`` for a constant array ``w`` of the same shape."""
    xv = value_of(x)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != xv.shape:
        raise ValueError(f"weighted_sum shape mismatch: {xv.shape} vs {w.shape}")
    return _emit(np.asarray(float(np.sum(xv * w))), (x,), lambda g: (float(g) * w,))


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    """Softmax over the last axis."""
    p = _softmax(value_of(x))
    return _emit(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy of row-wise softmax against integer class targets.

    A 1-D ``logits`` vector is treated as a single row.
    """
    lv = value_of(logits)
    one_row = lv.ndim == 1
    l2 = lv[None, :] if one_row else lv
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (l2.shape[0],):
        raise ValueError("one target per row required")
    if t.min() < 0 or t.max() >= l2.shape[1]:
        raise ValueError("target class out of range")
    z = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(t))
    loss = float(np.mean(lse - z[rows, t]))
    n = len(t)

    def vjp(g):
        d = _softmax(l2)
        d[rows, t] -= 1.0
        d *= float(g) / n
        return (d[0] if one_row else d,)

    return _emit(np.asarray(loss), (logits,), vjp)


def kl_divergence(p, q):
    """``sum p * (ln p - ln q)`` summed over the last axis and averaged over rows.

    Logs are clamped at ``1e-12``; ``0 * ln 0`` contributes 0.
    """
    pv, qv = value_of(p), value_of(q)
    if pv.shape != qv.shape:
        raise ValueError(f"kl_divergence shape mismatch: {pv.shape} vs {qv.shape}")
    rows = 1 if pv.ndim == 1 else pv.shape[0]
    pc, qc = np.maximum(pv, LOG_EPS), np.maximum(qv, LOG_EPS)
    val = float(np.sum(pv * (np.log(pc) - np.log(qc)))) / rows

    def vjp(g):
        g = float(g) / rows
        gp = g * (np.log(pc) - np.log(qc) + (pv > LOG_EPS))
        gq = -g * pv / qc * (qv > LOG_EPS)
        return gp, gq

    return _emit(np.asarray(val), (p, q), vjp)


def shannon_entropy(p):
    """Entropy in nats of a probability vector, with ``0 ln 0 := 0``."""
    pv = value_of(p)
    pc = np.maximum(pv, LOG_EPS)
    val = float(-np.sum(pv * np.log(pc)))
    return _emit(np.asarray(val), (p,), lambda g: (-float(g) * (np.log(pc) + (pv > LOG_EPS)),))


def mean_binary_entropy(p):
    """Mean of ``-p ln p - (1-p) ln(1-p)`` over all elements, logs clamped."""
    pv = value_of(p)
    a, b = np.maximum(pv, LOG_EPS), np.maximum(1.0 - pv, LOG_EPS)
    n = pv.size
    val = float(np.sum(-pv * np.log(a) - (1.0 - pv) * np.log(b))) / n

    def vjp(g):
        da = np.log(a) + (pv > LOG_EPS)
        db = np.log(b) + ((1.0 - pv) > LOG_EPS)
        return (float(g) / n * (db - da),)

    return _emit(np.asarray(val), (p,), vjp)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One Adam update with bias correction.

    With ``state.decoupled`` the decay enters as ``lr * weight_decay * param``
    subtracted outside the adaptive term; otherwise it is added to the
    gradient as an L2 penalty.  Moments in ``state`` are updated in place.

    Returns
    -------
    (list of new parameter arrays, state)
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("diverged: non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape}")
        if not state.decoupled and state.weight_decay:
            g = g + state.weight_decay * p
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        step = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        new = p - state.lr * step
        if state.decoupled and state.weight_decay:
            new = new - state.lr * state.weight_decay * p
        out.append(new)
    return out, state


# ---------------------------------------------------------------- verification


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def numeric_gradient(f: Callable, points: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f(*points)`` w.r.t. every entry."""
    pts = [np.array(p, dtype=np.float64) for p in points]
    grads = []
    for k, p in enumerate(pts):
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(value_of(f(*pts)))
            flat[j] = orig - h
            fm = float(value_of(f(*pts)))
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradient(f: Callable, points: Sequence[np.ndarray]) -> list[np.ndarray]:
    vars_ = [Var(np.array(p, dtype=np.float64)) for p in points]
    out = f(*vars_)
    if not isinstance(out, Var):
        return [np.zeros_like(v.value) for v in vars_]
    out.backward()
    return [v.grad if v.grad is not None else np.zeros_like(v.value) for v in vars_]


def grad_check(f: Callable, points, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``points`` is one array or a sequence of arrays passed positionally to
    ``f``; relative error is ``|ga - gn| / max(1, |ga|, |gn|)``.
    """
    if isinstance(points, np.ndarray) or np.isscalar(points):
        points = [np.asarray(points, dtype=np.float64)]
    ga = analytic_gradient(f, points)
    gn = numeric_gradient(f, points, h)
    errs = [relative_error(a, n).max(initial=0.0) for a, n in zip(ga, gn)]
    return float(max(errs, default=0.0))
