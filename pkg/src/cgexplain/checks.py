"""Finite-difference verification of every differentiable piece."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from . import numerics as nx
from .explainer import ExplainerConfig, explainer_loss, kd_lambda, kd_loss
from .graph import CellGraph, disjoint_union
from .model import CgnnConfig, forward_logits, init_model, predict, training_loss

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def random_graph(rng: np.random.Generator, n: int = 6, d: int = 18, p_edge: float = 0.4,
                 label: int | None = 0) -> CellGraph:
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p_edge]
    return CellGraph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), rng.normal(size=(n, d)),
                     rng.uniform(0, 200, size=(n, 2)), label)


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def _probs(rng, n, floor=0.05):
    p = rng.uniform(floor, 1.0, size=n)
    return p / p.sum()


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per primitive, each reduced to a scalar by a fixed projection."""
    r, c, k = (int(v) for v in rng.integers(2, 6, size=3))
    w_rc, w_rk, w_c = rng.normal(size=(r, c)), rng.normal(size=(r, k)), rng.normal(size=c)
    adj = sparse.random(r, r, density=0.5, random_state=np.random.RandomState(int(rng.integers(2**31))),
                        format="csr")
    adj = ((adj + adj.T) > 0).astype(float)
    ranges = np.array([[0, 1], [1, r]])
    w_2c = rng.normal(size=(2, c))
    target = rng.integers(0, c, size=r)
    p_fixed = _probs(rng, c)

    return {
        "matmul": (lambda a, b: nx.weighted_sum(nx.matmul(a, b), w_rk), [rng.normal(size=(r, c)), rng.normal(size=(c, k))]),
        "add": (lambda a, b: nx.weighted_sum(nx.add(a, b), w_rc), [rng.normal(size=(r, c)), rng.normal(size=(r, c))]),
        "add_bias": (lambda x, b: nx.weighted_sum(nx.add_bias(x, b), w_rc), [rng.normal(size=(r, c)), rng.normal(size=c)]),
        "relu": (lambda x: nx.weighted_sum(nx.relu(x), w_rc), [_away_from_zero(rng, (r, c))]),
        "sigmoid": (lambda x: nx.weighted_sum(nx.sigmoid(x), w_c), [rng.normal(size=c) * 3]),
        "row_scale": (lambda x, s: nx.weighted_sum(nx.row_scale(x, s), w_rc), [rng.normal(size=(r, c)), rng.normal(size=r)]),
        "neighbor_aggregate": (lambda x: nx.weighted_sum(nx.neighbor_aggregate(x, adj, 1.3), w_rc), [rng.normal(size=(r, c))]),
        "sum_rows": (lambda x: nx.weighted_sum(nx.sum_rows(x, ranges), w_2c), [rng.normal(size=(r, c))]),
        "mean_rows": (lambda x: nx.weighted_sum(nx.mean_rows(x, ranges), w_2c), [rng.normal(size=(r, c))]),
        "take_row": (lambda x: nx.weighted_sum(nx.take_row(x, r - 1), w_c), [rng.normal(size=(r, c))]),
        "softmax": (lambda x: nx.weighted_sum(nx.softmax(x), w_c), [rng.normal(size=c)]),
        "softmax_cross_entropy": (lambda x: nx.softmax_cross_entropy(x, target), [rng.normal(size=(r, c))]),
        "kl_divergence": (lambda p, q: nx.kl_divergence(p, q), [_probs(rng, c), _probs(rng, c)]),
        "kl_divergence_fixed_p": (lambda q: nx.kl_divergence(p_fixed, nx.softmax(q)), [rng.normal(size=c)]),
        "shannon_entropy": (lambda p: nx.shannon_entropy(p), [_probs(rng, c)]),
        "mean_binary_entropy": (lambda p: nx.mean_binary_entropy(p), [rng.uniform(0.05, 0.95, size=c)]),
    }


def check_primitives(seed: int = 0, instances: int = 10, tol: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, (f, pts) in primitive_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), nx.grad_check(f, pts))
    return [CheckResult(f"primitive:{k}", v, tol) for k, v in worst.items()]


def check_kd_loss(seed: int = 0, instances: int = 10, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = ExplainerConfig(distill_temperature=float(rng.uniform(0.5, 3.0)))
    err = 0.0
    for _ in range(instances):
        orig, cur = rng.normal(size=3) * 2, rng.normal(size=3) * 2
        lam = kd_lambda(cur, orig, cfg.lambda_clamp)
        err = max(err, nx.grad_check(lambda y: kd_loss(y, orig, cfg, lam), [cur]))
    return CheckResult("kd_loss", err, tol)


def check_training_loss(seed: int = 0, tol: float = TOLERANCE, readout: str = "mean") -> CheckResult:
    """Gradient of the batched training loss w.r.t. every CGNN parameter."""
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, 6, label=0), random_graph(rng, 6, label=2)]
    batch = disjoint_union(graphs)
    model = init_model(18, 3, CgnnConfig(seed=seed, readout=readout))
    for k in model.params:
        if ".b" in k:
            model.params[k] = rng.normal(scale=0.1, size=model.params[k].shape)
    names = model.param_names()

    def f(*arrays):
        return training_loss(model, batch, [0, 2], dict(zip(names, arrays)))

    return CheckResult(f"cgnn_training_loss[{readout}]", nx.grad_check(f, [model.params[k] for k in names]), tol)


def check_explainer_loss(seed: int = 0, tol: float = TOLERANCE) -> CheckResult:
    """Gradient of the explainer objective w.r.t. the node mask logits."""
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, 6)
    model = init_model(18, 3, CgnnConfig(seed=seed))
    original = predict(model, graph)
    cfg = ExplainerConfig()
    batch = disjoint_union([graph])
    m0 = rng.normal(size=6)
    lam = kd_lambda(nx.value_of(forward_logits(model, batch, m0))[0], original.logits, cfg.lambda_clamp)

    def f(m):
        return explainer_loss(model, batch, m, original, cfg, lam)[0]

    return CheckResult("explainer_loss", nx.grad_check(f, [m0]), tol)


def run_all(seed: int = 0, instances: int = 10) -> list[CheckResult]:
    out = check_primitives(seed, instances)
    out.append(check_kd_loss(seed, instances))
    out.append(check_training_loss(seed, readout="mean"))
    out.append(check_training_loss(seed, readout="sum"))
    out.append(check_explainer_loss(seed))
    return out
