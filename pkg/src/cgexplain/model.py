"""GIN cell-graph classifier: masked forward pass, training and prediction."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph import CellGraph, GraphBatch, GraphConfig, disjoint_union

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CgnnConfig:
    num_layers: int = 3
    hidden_dim: int = 32
    mlp_depth: int = 2
    classifier_hidden: int = 64
    classifier_depth: int = 2
    readout: str = "mean"
    epsilon_gin: float = 0.0
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "mlp_depth", "classifier_hidden", "classifier_depth", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.readout not in ("mean", "sum"):
            raise ValueError(f"readout must be 'mean' or 'sum', got {self.readout!r}")


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    predicted_class: int

    @classmethod
    def from_logits(cls, logits) -> "Prediction":
        logits = np.asarray(logits, dtype=np.float64)
        probs = nx.softmax(logits)
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return cls(logits, probs, int(np.argmax(logits)))


@dataclass
class CgnnModel:
    config: CgnnConfig
    in_dim: int
    num_classes: int
    params: dict[str, np.ndarray]
    class_names: list[str] = field(default_factory=list)
    graph_config: GraphConfig = GraphConfig()
    feature_stats: dict | None = None
    metadata: dict = field(default_factory=dict)

    def param_names(self) -> list[str]:
        return list(self.params)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(in_dim: int, num_classes: int, cfg: CgnnConfig = CgnnConfig(), **kwargs) -> CgnnModel:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    d = in_dim
    for layer in range(cfg.num_layers):
        for j in range(cfg.mlp_depth):
            params[f"gin{layer}.W{j}"] = _glorot(rng, d, cfg.hidden_dim)
            params[f"gin{layer}.b{j}"] = np.zeros(cfg.hidden_dim)
            d = cfg.hidden_dim
    for j in range(cfg.classifier_depth):
        out = num_classes if j == cfg.classifier_depth - 1 else cfg.classifier_hidden
        params[f"cls.W{j}"] = _glorot(rng, d, out)
        params[f"cls.b{j}"] = np.zeros(out)
        d = out
    return CgnnModel(cfg, in_dim, num_classes, params, **kwargs)


def gin_layer(h, adjacency, params: Sequence, epsilon: float = 0.0):
    """One GIN update: ``MLP((1 + eps) h_v + sum_{u in N(v)} h_u)``.

    ``params`` alternates weight and bias per MLP sublayer; ReLU follows every
    sublayer, the last included.
    """
    z = nx.neighbor_aggregate(h, adjacency, 1.0 + epsilon)
    for w, b in zip(params[0::2], params[1::2]):
        z = nx.relu(nx.add_bias(nx.matmul(z, w), b))
    return z


def _as_batch(graph) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, CellGraph):
        return disjoint_union([graph])
    return disjoint_union(list(graph))


def forward_logits(model: CgnnModel, batch: GraphBatch, mask_logits=None, params: dict | None = None):
    """Graph-level logits ``(num_graphs, C)``; a Var if any input is a Var.

    ``params`` overrides ``model.params`` (used for taping or perturbation).
    """
    p = model.params if params is None else params
    cfg = model.config
    h = batch.node_features
    if h.shape[1] != model.in_dim:
        raise ValueError(f"feature dimension {h.shape[1]} != model input {model.in_dim}")
    if mask_logits is not None:
        if nx.value_of(mask_logits).shape != (batch.num_nodes,):
            raise ValueError("mask length must equal node count")
        h = nx.row_scale(h, nx.sigmoid(mask_logits))
    for layer in range(cfg.num_layers):
        layer_params = []
        for j in range(cfg.mlp_depth):
            layer_params += [p[f"gin{layer}.W{j}"], p[f"gin{layer}.b{j}"]]
        h = gin_layer(h, batch.adjacency, layer_params, cfg.epsilon_gin)
    g = nx.mean_rows(h, batch.ranges) if cfg.readout == "mean" else nx.sum_rows(h, batch.ranges)
    for j in range(cfg.classifier_depth):
        g = nx.add_bias(nx.matmul(g, p[f"cls.W{j}"]), p[f"cls.b{j}"])
        if j < cfg.classifier_depth - 1:
            g = nx.relu(g)
    return g


def model_forward(model: CgnnModel, graph, mask_logits=None) -> list[Prediction]:
    """Predictions per graph for a CellGraph, a list of graphs or a GraphBatch."""
    logits = nx.value_of(forward_logits(model, _as_batch(graph), mask_logits))
    if logits.shape[1] != model.num_classes:
        raise ValueError("class-count mismatch")
    return [Prediction.from_logits(row) for row in logits]


def predict(model: CgnnModel, graph: CellGraph) -> Prediction:
    return model_forward(model, graph)[0]


def predict_many(model: CgnnModel, graphs: Sequence[CellGraph], batch_size: int = 64) -> list[Prediction]:
    out: list[Prediction] = []
    for i in range(0, len(graphs), batch_size):
        out += model_forward(model, graphs[i:i + batch_size])
    return out


def training_loss(model: CgnnModel, batch: GraphBatch, labels, params: dict | None = None):
    return nx.softmax_cross_entropy(forward_logits(model, batch, params=params), labels)


def loss_and_grads(model: CgnnModel, batch: GraphBatch, labels) -> tuple[float, dict[str, np.ndarray]]:
    vars_ = {k: nx.Var(v) for k, v in model.params.items()}
    loss = training_loss(model, batch, labels, vars_)
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vars_.items()}
    return float(loss.value), grads


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train(
    train_graphs: Sequence[CellGraph],
    cfg: CgnnConfig = CgnnConfig(),
    val_graphs: Sequence[CellGraph] = (),
    num_classes: int | None = None,
    **model_kwargs,
) -> tuple[CgnnModel, TrainHistory]:
    """Fit a CGNN with Adam on shuffled disjoint-union mini-batches.

    Parameters from the epoch with the best validation weighted F1 are
    returned (earliest on ties); without validation graphs the final epoch
    wins.  Graphs must carry labels.
    """
    from .metrics import weighted_f1

    if len(train_graphs) == 0:
        raise ValueError("empty training split")
    labels = np.array([g.label for g in train_graphs], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    model = init_model(train_graphs[0].feature_dim, num_classes, cfg, **model_kwargs)
    names = model.param_names()
    state = nx.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    hist = TrainHistory()
    best_f1, best_params = -1.0, dict(model.params)
    val_labels = [g.label for g in val_graphs]

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_graphs))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = disjoint_union([train_graphs[j] for j in idx])
            loss, grads = loss_and_grads(model, batch, labels[idx])
            if not np.isfinite(loss):
                raise nx.DivergenceError(f"diverged: non-finite loss at epoch {epoch}")
            try:
                new, state = nx.adam_step([model.params[k] for k in names], [grads[k] for k in names], state)
            except nx.DivergenceError as exc:
                raise nx.DivergenceError(f"{exc} at epoch {epoch}") from None
            model.params = dict(zip(names, new))
            losses.append(loss * len(idx))
        hist.train_loss.append(float(np.sum(losses) / len(order)))
        if val_graphs:
            preds = [p.predicted_class for p in predict_many(model, val_graphs)]
            f1 = weighted_f1(preds, val_labels)
            hist.val_f1.append(f1)
            if f1 > best_f1:
                best_f1, best_params, hist.best_epoch = f1, dict(model.params), epoch
        log.debug("epoch %d loss %.4f", epoch, hist.train_loss[-1])

    if val_graphs:
        model.params = best_params
    else:
        hist.best_epoch = cfg.epochs - 1
    model.metadata.update(epochs_run=cfg.epochs, best_epoch=hist.best_epoch)
    return model, hist


# ---------------------------------------------------------------- checkpoints


def model_to_dict(model: CgnnModel) -> dict:
    return {
        "config": asdict(model.config),
        "graph_config": asdict(model.graph_config),
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "class_names": list(model.class_names),
        "feature_stats": model.feature_stats,
        "metadata": model.metadata,
        "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in model.params.items()},
    }


def model_from_dict(d: dict) -> CgnnModel:
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
    model = CgnnModel(
        config=CgnnConfig(**d["config"]),
        in_dim=int(d["in_dim"]),
        num_classes=int(d["num_classes"]),
        params=params,
        class_names=list(d.get("class_names", [])),
        graph_config=GraphConfig(**d.get("graph_config", {})),
        feature_stats=d.get("feature_stats"),
        metadata=d.get("metadata", {}),
    )
    ref = init_model(model.in_dim, model.num_classes, model.config)
    for k, v in ref.params.items():
        if k not in params or params[k].shape != v.shape:
            raise ValueError(f"checkpoint parameter {k} missing or mis-shaped")
    return model


def save_model(model: CgnnModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True))


def load_model(path) -> CgnnModel:
    return model_from_dict(json.loads(Path(path).read_text()))
