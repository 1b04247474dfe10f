"""Dataset ingestion, feature normalization, synthetic RoIs and explanation files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import CellGraph, GraphConfig, NucleusRecord, build_cell_graph, extract_subgraph
from .model import Prediction

SPLITS = ("train", "val", "test")

CLASS_NAMES = {2: ["N+B", "D+I"], 3: ["N+B", "A", "D+I"], 5: ["N", "B", "A", "D", "I"]}
# label merges from the five-class labelling; None drops the RoI
SCENARIO_MAPS = {
    5: {0: 0, 1: 1, 2: 2, 3: 3, 4: 4},
    3: {0: 0, 1: 0, 2: 1, 3: 2, 4: 2},
    2: {0: 0, 1: 0, 2: None, 3: 1, 4: 1},
}


class DatasetError(ValueError):
    pass


@dataclass
class RoiRecord:
    id: str
    image_w: float
    image_h: float
    label: int
    nuclei: list[NucleusRecord]
    planted_relevant: tuple[int, ...] | None = None

    def to_graph(self, cfg: GraphConfig = GraphConfig()) -> CellGraph:
        return build_cell_graph(self.nuclei, self.image_w, self.image_h, cfg, label=self.label)

    @property
    def features(self) -> np.ndarray:
        return np.stack([n.features for n in self.nuclei])


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    @classmethod
    def from_rois(cls, rois: Sequence[RoiRecord], tol: float = 1e-12) -> "FeatureStats":
        feats = np.vstack([r.features for r in rois])
        std = feats.std(axis=0)
        return cls(feats.mean(axis=0), std, std <= tol)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["constant"], bool))


@dataclass
class DatasetSplit:
    train: list[RoiRecord]
    val: list[RoiRecord]
    test: list[RoiRecord]
    class_names: list[str]
    feature_stats: FeatureStats | None = None

    def split(self, name: str) -> list[RoiRecord]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_rois(self) -> list[RoiRecord]:
        return self.train + self.val + self.test


# ---------------------------------------------------------------- JSON I/O


def _roi_from_json(obj: dict, num_classes: int, where: str) -> RoiRecord:
    rid = obj.get("id", "?")
    try:
        rid = str(obj["id"])
        w, h, label = obj["w"], obj["h"], obj["label"]
        nuclei_json = obj["nuclei"]
    except KeyError as exc:
        raise DatasetError(f"{where}: RoI {rid!r} missing field {exc.args[0]!r}") from None
    if not isinstance(label, int) or not 0 <= label < num_classes:
        raise DatasetError(f"{where}: RoI {rid!r} field 'label' out of range: {label!r}")
    if not (isinstance(w, (int, float)) and isinstance(h, (int, float)) and w > 0 and h > 0):
        raise DatasetError(f"{where}: RoI {rid!r} fields 'w'/'h' must be positive numbers")
    if not isinstance(nuclei_json, list) or not nuclei_json:
        raise DatasetError(f"{where}: RoI {rid!r} field 'nuclei' must be a non-empty list")
    nuclei = []
    dim = None
    for i, n in enumerate(nuclei_json):
        try:
            x, y, f = float(n["x"]), float(n["y"]), np.asarray(n["f"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: RoI {rid!r} nucleus {i} malformed field 'x'/'y'/'f': {exc}") from None
        if x < 0 or y < 0:
            raise DatasetError(f"{where}: RoI {rid!r} nucleus {i} field 'x'/'y' negative")
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise DatasetError(f"{where}: RoI {rid!r} nucleus {i} field 'f' invalid feature")
        if dim is None:
            dim = len(f)
        elif len(f) != dim:
            raise DatasetError(f"{where}: RoI {rid!r} nucleus {i} field 'f' length {len(f)} != {dim}")
        nuclei.append(NucleusRecord(x, y, f))
    planted = obj.get("planted")
    if planted is not None:
        planted = tuple(int(p) for p in planted)
        if any(p < 0 or p >= len(nuclei) for p in planted):
            raise DatasetError(f"{where}: RoI {rid!r} field 'planted' index out of range")
    return RoiRecord(rid, w, h, label, nuclei, planted)


def dataset_from_json(doc: dict) -> DatasetSplit:
    if "class_names" not in doc or "splits" not in doc:
        raise DatasetError("dataset: missing field 'class_names' or 'splits'")
    names = [str(c) for c in doc["class_names"]]
    if len(names) < 2:
        raise DatasetError("dataset: field 'class_names' needs at least two classes")
    parts = {}
    for s in SPLITS:
        rois = doc["splits"].get(s, [])
        parts[s] = [_roi_from_json(r, len(names), f"split {s}") for r in rois]
    seen: dict[str, str] = {}
    for s in SPLITS:
        for r in parts[s]:
            if r.id in seen:
                raise DatasetError(f"split overlap: RoI id {r.id!r} in {seen[r.id]} and {s}")
            seen[r.id] = s
    dims = {len(r.nuclei[0].features) for s in SPLITS for r in parts[s]}
    if len(dims) > 1:
        raise DatasetError(f"dataset: inconsistent feature length across RoIs {sorted(dims)}")
    if not parts["train"]:
        raise DatasetError("dataset: split 'train' is empty")
    return DatasetSplit(parts["train"], parts["val"], parts["test"], names, FeatureStats.from_rois(parts["train"]))


def parse_dataset(path) -> DatasetSplit:
    """Read and validate a dataset file; feature statistics come from train only."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from None
    return dataset_from_json(doc)


def _roi_to_json(r: RoiRecord) -> dict:
    out = {
        "id": r.id,
        "w": r.image_w,
        "h": r.image_h,
        "label": int(r.label),
        "nuclei": [{"x": n.x, "y": n.y, "f": n.features.tolist()} for n in r.nuclei],
    }
    if r.planted_relevant is not None:
        out["planted"] = [int(p) for p in r.planted_relevant]
    return out


def dataset_to_json(ds: DatasetSplit) -> dict:
    return {"class_names": list(ds.class_names),
            "splits": {s: [_roi_to_json(r) for r in ds.split(s)] for s in SPLITS}}


def write_dataset(ds: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(ds), sort_keys=True))


# ---------------------------------------------------------------- transforms


def _scale_roi(r: RoiRecord, stats: FeatureStats) -> RoiRecord:
    mean = np.where(stats.constant, 0.0, stats.mean)
    std = np.where(stats.constant, 1.0, stats.std)
    nuclei = [NucleusRecord(n.x, n.y, (n.features - mean) / std) for n in r.nuclei]
    return replace(r, nuclei=nuclei)


def normalize_features(ds: DatasetSplit, stats: FeatureStats | None = None) -> DatasetSplit:
    """Z-score nucleus features with train statistics.

    Constant dimensions (flagged in ``stats.constant``) are left as they are.
    The returned split carries statistics recomputed on the normalized train
    RoIs.
    """
    stats = stats or ds.feature_stats
    if stats is None:
        raise DatasetError("feature_stats missing")
    parts = {s: [_scale_roi(r, stats) for r in ds.split(s)] for s in SPLITS}
    return DatasetSplit(parts["train"], parts["val"], parts["test"], list(ds.class_names),
                        FeatureStats.from_rois(parts["train"]))


def map_classes(ds: DatasetSplit, num_classes: int) -> DatasetSplit:
    """Merge a five-class labelling into the 2- or 3-class scenario."""
    if len(ds.class_names) == num_classes:
        return ds
    if len(ds.class_names) != 5 or num_classes not in SCENARIO_MAPS:
        raise DatasetError(f"cannot map {len(ds.class_names)} classes onto {num_classes}")
    table = SCENARIO_MAPS[num_classes]
    parts = {s: [replace(r, label=table[r.label]) for r in ds.split(s) if table[r.label] is not None]
             for s in SPLITS}
    return DatasetSplit(parts["train"], parts["val"], parts["test"], list(CLASS_NAMES[num_classes]),
                        FeatureStats.from_rois(parts["train"]))


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic RoI generator.

    Class 0 RoIs contain background nuclei only.  Class ``c >= 1`` RoIs also
    contain a spatial cluster of planted nuclei whose features are shifted by
    ``signal * sqrt(2 / num_classes)`` background standard deviations along
    feature dimension ``c - 1``; cluster size and spread grow with ``c``.
    """

    num_classes: int = 3
    rois_per_class: int = 140
    nuclei_per_roi: tuple[int, int] = (60, 100)
    planted_cluster_size: tuple[int, int] = (8, 14)
    feature_dim: int = 16
    noise_scale: float = 1.0
    seed: int = 0
    image_size: int = 256
    signal: float = 4.0
    val_fraction: float = 1 / 7
    test_fraction: float = 1 / 7

    def __post_init__(self):
        if self.num_classes not in (2, 3, 5):
            raise ValueError("num_classes must be 2, 3 or 5")
        if self.rois_per_class < 1 or self.feature_dim < 1:
            raise ValueError("counts must be >= 1")
        if self.feature_dim < self.num_classes - 1:
            raise ValueError("feature_dim too small for class-indexed shifts")
        for lo, hi in (self.nuclei_per_roi, self.planted_cluster_size):
            if lo < 1 or hi < lo:
                raise ValueError("ranges must satisfy 1 <= lo <= hi")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def _synth_roi(spec: SynthSpec, label: int, ordinal: int, loc: np.ndarray, spread: np.ndarray) -> RoiRecord:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, ordinal]))
    size = float(spec.image_size)
    n_bg = int(rng.integers(spec.nuclei_per_roi[0], spec.nuclei_per_roi[1] + 1))
    pos = rng.uniform(0.0, size, size=(n_bg, 2))
    z = spec.noise_scale * rng.standard_normal((n_bg, spec.feature_dim))
    planted_mask = np.zeros(n_bg, dtype=bool)
    if label >= 1:
        grow = label - 1
        n_p = int(rng.integers(spec.planted_cluster_size[0], spec.planted_cluster_size[1] + 1)) + 2 * grow
        radius = 12.0 + 3.0 * grow
        center = rng.uniform(2 * radius, size - 2 * radius, size=2)
        ppos = np.clip(center + radius * rng.standard_normal((n_p, 2)), 0.0, size)
        pz = spec.noise_scale * rng.standard_normal((n_p, spec.feature_dim))
        pz[:, label - 1] += spec.signal * np.sqrt(2.0 / spec.num_classes)
        pos = np.vstack([pos, ppos])
        z = np.vstack([z, pz])
        planted_mask = np.concatenate([planted_mask, np.ones(n_p, dtype=bool)])
    order = rng.permutation(len(pos))
    pos, z, planted_mask = pos[order], z[order], planted_mask[order]
    feats = loc + spread * z
    nuclei = [NucleusRecord(float(p[0]), float(p[1]), f) for p, f in zip(pos, feats)]
    planted = tuple(int(i) for i in np.flatnonzero(planted_mask))
    return RoiRecord(f"roi{ordinal:05d}", size, size, label, nuclei, planted)


def generate_synthetic(spec: SynthSpec = SynthSpec()) -> DatasetSplit:
    """Deterministic synthetic dataset with planted class-relevant nuclei."""
    master = np.random.default_rng(spec.seed)
    loc = master.uniform(-5.0, 5.0, size=spec.feature_dim)
    spread = master.uniform(0.5, 3.0, size=spec.feature_dim)
    n_val = int(round(spec.rois_per_class * spec.val_fraction))
    n_test = int(round(spec.rois_per_class * spec.test_fraction))
    n_train = spec.rois_per_class - n_val - n_test
    if n_train < 1:
        raise ValueError("no RoIs left for the train split")
    parts: dict[str, list[RoiRecord]] = {s: [] for s in SPLITS}
    ordinal = 0
    for c in range(spec.num_classes):
        for i in range(spec.rois_per_class):
            roi = _synth_roi(spec, c, ordinal, loc, spread)
            ordinal += 1
            split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            parts[split].append(roi)
    return DatasetSplit(parts["train"], parts["val"], parts["test"], list(CLASS_NAMES[spec.num_classes]),
                        FeatureStats.from_rois(parts["train"]))


# ---------------------------------------------------------------- explanations


def explanation_to_json(expl) -> dict:
    return {
        "roi_id": expl.roi_id,
        "mask_logits": np.asarray(expl.mask.logits, float).tolist(),
        "sigmoid": expl.mask.activation.tolist(),
        "kept_nodes": [int(i) for i in expl.kept_nodes],
        "kept_edges": [[int(u), int(v)] for u, v in (expl.kept_edges if expl.kept_edges is not None else [])],
        "stop_reason": expl.stop_reason,
        "loss_trace": [float(v) for v in expl.loss_trace],
        "loss_components": {k: [float(x) for x in v] for k, v in expl.loss_components.items()},
        "predicted_class": int(expl.original_prediction.predicted_class),
        "original_logits": expl.original_prediction.logits.tolist(),
        "explanation_logits": expl.explanation_prediction.logits.tolist(),
        "flags": list(expl.flags),
    }


def explanation_from_json(doc: dict, graph: CellGraph | None = None):
    from .explainer import STOP_REASONS, Explanation, NodeMask

    for key in ("roi_id", "mask_logits", "kept_nodes", "kept_edges", "stop_reason", "loss_trace", "predicted_class"):
        if key not in doc:
            raise DatasetError(f"explanation: missing field {key!r}")
    logits = np.asarray(doc["mask_logits"], dtype=np.float64)
    n = len(logits) if graph is None else graph.num_nodes
    if graph is not None and len(logits) != n:
        raise DatasetError("explanation: mask length does not match graph")
    kept = np.asarray(doc["kept_nodes"], dtype=np.int64)
    if len(kept) and (kept.min() < 0 or kept.max() >= n):
        raise DatasetError("explanation: kept node index out of range")
    if doc["stop_reason"] not in STOP_REASONS:
        raise DatasetError(f"explanation: unknown stop_reason {doc['stop_reason']!r}")
    edges = np.asarray(doc["kept_edges"], dtype=np.int64).reshape(-1, 2)
    kept_set = set(kept.tolist())
    if any(int(u) not in kept_set or int(v) not in kept_set for u, v in edges):
        raise DatasetError("explanation: kept edge endpoint not among kept nodes")
    c = int(doc["predicted_class"])
    orig = doc.get("original_logits")
    orig_pred = Prediction.from_logits(orig) if orig is not None else _onehot_prediction(c)
    ex = doc.get("explanation_logits")
    ex_pred = Prediction.from_logits(ex) if ex is not None else orig_pred
    sub = extract_subgraph(graph, kept)[0] if graph is not None and len(kept) else None
    return Explanation(
        roi_id=str(doc["roi_id"]),
        mask=NodeMask(logits),
        kept_nodes=kept,
        stop_reason=doc["stop_reason"],
        loss_trace=[float(v) for v in doc["loss_trace"]],
        original_prediction=orig_pred,
        explanation_prediction=ex_pred,
        subgraph=sub,
        kept_edges=edges,
        loss_components={k: list(v) for k, v in doc.get("loss_components", {}).items()},
        flags=list(doc.get("flags", [])),
    )


def _onehot_prediction(c: int) -> Prediction:
    logits = np.zeros(c + 1)
    logits[c] = 1.0
    return Prediction.from_logits(logits)


def write_explanation(expl, path) -> None:
    Path(path).write_text(json.dumps(explanation_to_json(expl), sort_keys=True))


def read_explanation(path, graph: CellGraph | None = None):
    """Load an explanation; with ``graph`` the subgraph is rebuilt and indices checked."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: not valid JSON ({exc})") from None
    return explanation_from_json(doc, graph)


def overlay_to_json(expl, graph: CellGraph) -> dict:
    """Kept-node centroids (pixels), their mask activations and induced edges."""
    sig = expl.mask.activation
    return {
        "roi_id": expl.roi_id,
        "nodes": [{"index": int(i), "x": float(graph.centroids_px[i, 0]), "y": float(graph.centroids_px[i, 1]),
                   "sigmoid": float(sig[i])} for i in expl.kept_nodes],
        "edges": [[int(u), int(v)] for u, v in (expl.kept_edges if expl.kept_edges is not None else [])],
    }


def write_overlay(expl, graph: CellGraph, path) -> None:
    Path(path).write_text(json.dumps(overlay_to_json(expl, graph), sort_keys=True))
