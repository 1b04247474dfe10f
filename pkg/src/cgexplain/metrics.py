"""Evaluation: weighted F1, explanation compactness, cross-entropy comparison."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import CellGraph
from .model import CgnnModel, predict_many


def per_class_f1(predictions: Sequence[int], labels: Sequence[int],
                 num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """F1 and support for every class; F1 is 0 when precision + recall is 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if len(pred) == 0 or len(pred) != len(true):
        raise ValueError("predictions and labels must be non-empty and equal length")
    c = int(max(pred.max(), true.max()) + 1) if num_classes is None else num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    denom = support + predicted
    return np.divide(2 * tp, denom, out=np.zeros(c), where=denom > 0), support


def weighted_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: int | None = None) -> float:
    """Support-weighted mean of per-class F1."""
    f1, support = per_class_f1(predictions, labels, num_classes)
    return float(np.sum(support / support.sum() * f1))


def node_edge_reduction(original: CellGraph, explanation: CellGraph) -> tuple[float, float]:
    if explanation.num_nodes > original.num_nodes:
        raise ValueError("explanation larger than original")
    node = 100.0 * (1.0 - explanation.num_nodes / original.num_nodes)
    edge = 0.0 if original.num_edges == 0 else 100.0 * (1.0 - explanation.num_edges / original.num_edges)
    return node, edge


def _group(values: Sequence[float], labels: Sequence[int], num_classes: int) -> dict:
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for c in range(num_classes):
        sel = labels == c
        out[c] = float(values[sel].mean()) if sel.any() else float("nan")
    out["all"] = float(values.mean()) if len(values) else float("nan")
    return out


def reduction_stats(pairs: Sequence[tuple[CellGraph, CellGraph]], labels: Sequence[int],
                    num_classes: int | None = None) -> dict:
    """Per-class and overall mean node/edge reduction in percent."""
    c = int(max(labels)) + 1 if num_classes is None else num_classes
    red = np.array([node_edge_reduction(o, e) for o, e in pairs]).reshape(-1, 2)
    return {"node": _group(red[:, 0], labels, c), "edge": _group(red[:, 1], labels, c)}


def cross_entropies(model: CgnnModel, graphs: Sequence[CellGraph], labels: Sequence[int]) -> np.ndarray:
    preds = predict_many(model, list(graphs))
    return np.array([float(nx.softmax_cross_entropy(p.logits, int(y))) for p, y in zip(preds, labels)])


def ce_report(model: CgnnModel, rows: Sequence[tuple], num_classes: int | None = None) -> dict:
    """Mean CE vs. ground truth for original, explanation and random graphs.

    Each row is ``(graph, explanation_graph, random_graph_or_list, label)``;
    a list of random graphs is averaged per RoI.
    """
    labels = [int(r[3]) for r in rows]
    c = model.num_classes if num_classes is None else num_classes
    orig = cross_entropies(model, [r[0] for r in rows], labels)
    expl = cross_entropies(model, [r[1] for r in rows], labels)
    rand_lists = [r[2] if isinstance(r[2], (list, tuple)) else [r[2]] for r in rows]
    flat = [g for lst in rand_lists for g in lst]
    flat_labels = [y for lst, y in zip(rand_lists, labels) for _ in lst]
    flat_ce = cross_entropies(model, flat, flat_labels)
    rand, i = [], 0
    for lst in rand_lists:
        rand.append(float(flat_ce[i:i + len(lst)].mean()))
        i += len(lst)
    return {
        "original": _group(orig, labels, c),
        "explanation": _group(expl, labels, c),
        "random": _group(rand, labels, c),
    }


def planted_relevance(kept_sets: Sequence, planted_sets: Sequence) -> dict:
    """Precision/recall of kept nodes against planted nodes, per RoI and mean.

    RoIs with an empty planted set are skipped.
    """
    if len(kept_sets) != len(planted_sets):
        raise ValueError("kept and planted lists differ in length")
    prec, rec = [], []
    for kept, planted in zip(kept_sets, planted_sets):
        if planted is None:
            raise ValueError("missing planted set")
        planted, kept = set(map(int, planted)), set(map(int, kept))
        if not planted:
            continue
        hit = len(kept & planted)
        prec.append(hit / len(kept) if kept else 0.0)
        rec.append(hit / len(planted))
    return {
        "precision": prec,
        "recall": rec,
        "mean_precision": float(np.mean(prec)) if prec else float("nan"),
        "mean_recall": float(np.mean(rec)) if rec else float("nan"),
    }


@dataclass
class EvalReport:
    class_names: list[str]
    weighted_f1: dict
    node_reduction: dict
    edge_reduction: dict
    ce: dict
    counts: dict
    planted: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def keys(d):
            return {str(k): v for k, v in d.items()}

        out = asdict(self)
        for name in ("weighted_f1", "node_reduction", "edge_reduction", "counts"):
            out[name] = keys(out[name])
        out["ce"] = {k: keys(v) for k, v in self.ce.items()}
        return out


def build_report(class_names: Sequence[str], predictions: Sequence[int], labels: Sequence[int],
                 reductions: dict, ce: dict, planted: dict | None = None) -> EvalReport:
    c = len(class_names)
    true = np.asarray(labels)
    per, _ = per_class_f1(predictions, labels, c)
    f1: dict = {k: float(per[k]) for k in range(c)}
    f1["all"] = weighted_f1(predictions, labels, c)
    counts = {k: int(np.sum(true == k)) for k in range(c)}
    counts["all"] = len(true)
    return EvalReport(list(class_names), f1, reductions["node"], reductions["edge"], ce, counts, planted or {})


def format_table(report: EvalReport) -> str:
    """Plain-text table: metric rows by class columns, ``All`` last."""
    cols = list(range(len(report.class_names))) + ["all"]
    head = ["Metric"] + list(report.class_names) + ["All"]
    rows = [
        ("Weighted F1-score", report.weighted_f1, "{:.2f}"),
        ("Node reduction (%)", report.node_reduction, "{:.1f}"),
        ("Edge reduction (%)", report.edge_reduction, "{:.1f}"),
        ("Original CE", report.ce["original"], "{:.2f}"),
        ("Explanation CE", report.ce["explanation"], "{:.2f}"),
        ("Random CE", report.ce["random"], "{:.2f}"),
        ("Count", report.counts, "{:d}"),
    ]
    body = [[name] + [fmt.format(vals[c]) if not (isinstance(vals[c], float) and np.isnan(vals[c])) else "-"
                      for c in cols] for name, vals, fmt in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r))
             for r in [head] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
