"""Node-mask explainer for cell-graph classifiers, plus a random baseline."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import CellGraph, GraphError, disjoint_union, extract_subgraph, with_edges
from .model import CgnnModel, Prediction, forward_logits, predict

log = logging.getLogger(__name__)

STOP_REASONS = ("converged", "label_flip", "max_iters")


@dataclass(frozen=True)
class ExplainerConfig:
    lr: float = 0.01
    alpha_mask: float = 0.005
    alpha_entropy: float = 0.1
    max_iters: int = 500
    convergence_tol: float = 1e-4
    convergence_window: int = 10
    mask_init: str = "zeros"  # or "normal"
    init_std: float = 0.1
    binarize_threshold: float = 0.5
    distill_temperature: float = 1.0
    lambda_clamp: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.alpha_mask < 0 or self.alpha_entropy < 0:
            raise ValueError("regularizer weights must be >= 0")
        if not 0 < self.binarize_threshold < 1:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        if self.mask_init not in ("zeros", "normal"):
            raise ValueError(f"unknown mask_init {self.mask_init!r}")
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be > 0")
        object.__setattr__(self, "lambda_clamp", tuple(self.lambda_clamp))


@dataclass
class NodeMask:
    logits: np.ndarray

    @property
    def activation(self) -> np.ndarray:
        return nx.sigmoid(np.asarray(self.logits, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.logits)


@dataclass
class Explanation:
    roi_id: str
    mask: NodeMask
    kept_nodes: np.ndarray
    stop_reason: str
    loss_trace: list[float]
    original_prediction: Prediction
    explanation_prediction: Prediction
    subgraph: CellGraph | None = None
    kept_edges: np.ndarray | None = None
    loss_components: dict[str, list[float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.loss_trace)


def binarize_mask(mask: NodeMask, threshold: float = 0.5) -> np.ndarray:
    """Indices with ``sigmoid(logit) >= threshold``, ascending."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return np.flatnonzero(mask.activation >= threshold)


def kd_lambda(current_logits, original_logits, clamp=(0.0, 1.0)) -> float:
    h_cur = float(nx.shannon_entropy(nx.softmax(np.asarray(current_logits, float))))
    h_orig = float(nx.shannon_entropy(nx.softmax(np.asarray(original_logits, float))))
    return float(np.clip(h_cur / max(h_orig, 1e-8), clamp[0], clamp[1]))


def kd_loss(current_logits, original_logits, cfg: ExplainerConfig = ExplainerConfig(),
            lam: float | None = None):
    """Entropy-weighted mix of hard cross-entropy and soft distillation.

    The weight on the cross-entropy term is the ratio of the current to the
    original prediction entropy, clamped and held constant for gradients
    (pass ``lam`` to pin it, e.g. for finite differences).  The hard target
    is the original predicted class.
    """
    orig = np.asarray(original_logits, dtype=np.float64).reshape(-1)
    cur_val = nx.value_of(current_logits).reshape(-1)
    if cur_val.shape != orig.shape:
        raise ValueError("logit vectors differ in length")
    if lam is None:
        lam = kd_lambda(cur_val, orig, cfg.lambda_clamp)
    t = cfg.distill_temperature
    ce = nx.softmax_cross_entropy(current_logits, int(np.argmax(orig)))
    teacher = nx.softmax(orig / t)
    student = nx.softmax(nx.scale(current_logits, 1.0 / t))
    dist = nx.scale(nx.kl_divergence(teacher, student), t * t)
    return nx.add(nx.scale(ce, lam), nx.scale(dist, 1.0 - lam))


def explainer_loss(model: CgnnModel, graph, mask_logits, original_prediction: Prediction,
                   cfg: ExplainerConfig = ExplainerConfig(), lam: float | None = None):
    """Total loss and its three components ``(kd, size, entropy)``.

    ``graph`` may be a CellGraph or a prebuilt single-graph batch.
    """
    batch = disjoint_union([graph]) if isinstance(graph, CellGraph) else graph
    cur = nx.take_row(forward_logits(model, batch, mask_logits), 0)
    kd = kd_loss(cur, original_prediction.logits, cfg, lam)
    s = nx.sigmoid(mask_logits)
    size = nx.scale(nx.sum_all(s), cfg.alpha_mask)
    ent = nx.scale(nx.mean_binary_entropy(s), cfg.alpha_entropy)
    total = nx.add(nx.add(kd, size), ent)
    comps = {"kd": float(nx.value_of(kd)), "size": float(nx.value_of(size)), "entropy": float(nx.value_of(ent))}
    return total, comps


def _initial_logits(n: int, cfg: ExplainerConfig, seed: int) -> np.ndarray:
    if cfg.mask_init == "zeros":
        return np.zeros(n)
    return np.random.default_rng(seed).normal(0.0, cfg.init_std, size=n)


def _kept_or_best(mask: NodeMask, threshold: float) -> tuple[np.ndarray, bool]:
    kept = binarize_mask(mask, threshold)
    if len(kept):
        return kept, False
    return np.array([int(np.argmax(mask.activation))]), True


def explain(model: CgnnModel, graph: CellGraph, cfg: ExplainerConfig = ExplainerConfig(),
            roi_id: str = "", seed: int | None = None, callback=None) -> Explanation:
    """Optimize a node mask with Adam until convergence, a label flip, or the budget.

    Each Adam iterate is accepted only if the thresholded subgraph keeps the
    original predicted class; the first rejected iterate ends the run and the
    previous one is returned.  ``callback(iteration, logits)`` sees every
    accepted iterate.
    """
    original = predict(model, graph)
    target = original.predicted_class
    batch = disjoint_union([graph])
    flags: list[str] = []

    def sub_prediction(logits):
        kept, empty = _kept_or_best(NodeMask(logits), cfg.binarize_threshold)
        sub, _ = extract_subgraph(graph, kept)
        return kept, empty, sub, predict(model, sub)

    m = _initial_logits(graph.num_nodes, cfg, cfg.seed if seed is None else seed)
    kept, empty, sub, sub_pred = sub_prediction(m)
    if sub_pred.predicted_class != target:
        flags.append("init_flipped_reset_to_zeros")
        m = np.zeros(graph.num_nodes)
        kept, empty, sub, sub_pred = sub_prediction(m)

    state = nx.AdamState(lr=cfg.lr)
    trace: list[float] = []
    comps: dict[str, list[float]] = {"kd": [], "size": [], "entropy": []}
    stop = "max_iters"
    w = cfg.convergence_window
    for _ in range(cfg.max_iters):
        mv = nx.Var(m)
        total, parts = explainer_loss(model, batch, mv, original, cfg)
        total.backward()
        trace.append(float(total.value))
        for k, v in parts.items():
            comps[k].append(v)
        (cand,), state = nx.adam_step([m], [mv.grad], state)
        c_kept, c_empty, c_sub, c_pred = sub_prediction(cand)
        if c_pred.predicted_class != target:
            stop = "label_flip"
            break
        m, kept, empty, sub, sub_pred = cand, c_kept, c_empty, c_sub, c_pred
        if callback is not None:
            callback(len(trace), m)
        if len(trace) > w:
            ref = trace[-1 - w]
            if abs(trace[-1] - ref) / max(abs(ref), 1e-12) < cfg.convergence_tol:
                stop = "converged"
                break
    if empty:
        flags.append("empty_kept_single_node")
    return Explanation(
        roi_id=roi_id,
        mask=NodeMask(m),
        kept_nodes=kept,
        stop_reason=stop,
        loss_trace=trace,
        original_prediction=original,
        explanation_prediction=sub_pred,
        subgraph=sub,
        kept_edges=kept[sub.edges] if len(sub.edges) else np.zeros((0, 2), dtype=np.int64),
        loss_components=comps,
        flags=flags,
    )


def _explain_job(args):
    model, graph, cfg, roi_id, seed = args
    return explain(model, graph, cfg, roi_id, seed)


def explain_many(model: CgnnModel, graphs: Sequence[CellGraph], roi_ids: Sequence[str],
                 cfg: ExplainerConfig = ExplainerConfig(), workers: int = 1) -> list[Explanation]:
    """Explain every graph; results come back in input order."""
    jobs = [(model, g, cfg, rid, cfg.seed + i) for i, (g, rid) in enumerate(zip(graphs, roi_ids))]
    if workers <= 1 or len(jobs) <= 1:
        return [_explain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_explain_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def random_explanation(graph: CellGraph, n_nodes: int, n_edges: int, seed: int,
                       return_nodes: bool = False):
    """Random subgraph with ``n_nodes`` nodes and up to ``n_edges`` induced edges.

    Nodes are drawn uniformly without replacement, then edges uniformly from
    those induced by the drawn nodes.
    """
    if n_nodes <= 0:
        raise GraphError("n_nodes must be >= 1")
    if n_nodes > graph.num_nodes:
        raise GraphError("n_nodes exceeds graph size")
    rng = np.random.default_rng(seed)
    nodes = np.sort(rng.choice(graph.num_nodes, size=n_nodes, replace=False))
    sub, _ = extract_subgraph(graph, nodes)
    m = min(max(n_edges, 0), sub.num_edges)
    pick = np.sort(rng.choice(sub.num_edges, size=m, replace=False)) if m else np.zeros(0, dtype=np.int64)
    out = with_edges(sub, sub.edges[pick])
    return (out, nodes) if return_nodes else out
