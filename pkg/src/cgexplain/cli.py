"""Command-line entry point: synth, train, explain, evaluate, gradcheck."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checks
from .data import (DatasetError, FeatureStats, SynthSpec, generate_synthetic, map_classes, normalize_features,
                   parse_dataset, read_explanation, write_dataset, write_explanation, write_overlay)
from .explainer import ExplainerConfig, explain_many, random_explanation
from .graph import GraphConfig, GraphError
from .metrics import build_report, ce_report, format_table, planted_relevance, reduction_stats
from .model import CgnnConfig, load_model, predict_many, save_model, train

log = logging.getLogger("cgexplain")


class UsageError(Exception):
    pass


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _clean(obj):
    """JSON-safe copy: NaN becomes null, tuples become lists."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n")


def write_manifest(path, command: str, config: dict, seeds: dict, inputs: list, outputs: list, started: float):
    dump_json({
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
    }, path)


def _graphs_for(model, dataset_path, split: str):
    ds = parse_dataset(dataset_path)
    ds = map_classes(ds, model.num_classes)
    if model.feature_stats is not None:
        ds = normalize_features(ds, FeatureStats.from_dict(model.feature_stats))
    rois = sorted(ds.split(split), key=lambda r: r.id)
    return rois, [r.to_graph(model.graph_config) for r in rois]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    spec = SynthSpec(num_classes=args.classes, rois_per_class=args.rois_per_class, feature_dim=args.feature_dim,
                     noise_scale=args.noise_scale, seed=args.seed)
    ds = generate_synthetic(spec)
    out = Path(args.out)
    write_dataset(ds, out)
    write_manifest(f"{out}.manifest.json", "synth", asdict(spec), {"seed": args.seed}, [], [out], t0)
    print(f"wrote {out}: {len(ds.train)}/{len(ds.val)}/{len(ds.test)} RoIs")
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    ds = parse_dataset(args.dataset)
    if args.classes is not None:
        ds = map_classes(ds, args.classes)
    stats = ds.feature_stats
    ds = normalize_features(ds)
    gcfg = GraphConfig(k=args.k, max_edge_px=args.max_edge_px)
    cfg = CgnnConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                     readout=args.readout, seed=args.seed)
    tr = [r.to_graph(gcfg) for r in ds.train]
    va = [r.to_graph(gcfg) for r in ds.val]
    model, hist = train(tr, cfg, va, num_classes=len(ds.class_names), class_names=ds.class_names,
                        graph_config=gcfg, feature_stats=stats.to_dict())
    out = Path(args.out)
    save_model(model, out)
    hist_path = Path(f"{out}.history.json")
    dump_json(asdict(hist), hist_path)
    write_manifest(f"{out}.manifest.json", "train", {"cgnn": asdict(cfg), "graph": asdict(gcfg)},
                   {"seed": args.seed}, [args.dataset], [out, hist_path], t0)
    best = hist.val_f1[hist.best_epoch] if hist.val_f1 else float("nan")
    print(f"wrote {out}: best epoch {hist.best_epoch}, val weighted F1 {best:.3f}")
    return 0


def cmd_explain(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.model)
    rois, graphs = _graphs_for(model, args.dataset, args.split)
    cfg = ExplainerConfig(lr=args.explainer_lr, alpha_mask=args.alpha_mask, alpha_entropy=args.alpha_entropy,
                          max_iters=args.max_iters, binarize_threshold=args.threshold, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers or os.cpu_count() or 1
    expls = explain_many(model, graphs, [r.id for r in rois], cfg, workers)
    outputs = []
    for e, g in zip(expls, graphs):
        p, o = out / f"{e.roi_id}.json", out / f"{e.roi_id}.overlay.json"
        write_explanation(e, p)
        write_overlay(e, g, o)
        outputs += [p, o]
    config = {"explainer": asdict(cfg), "split": args.split, "model_hash": file_hash(args.model)}
    write_manifest(out / "manifest.json", "explain", config, {"seed": args.seed}, [args.model, args.dataset],
                   [p.name for p in outputs], t0)
    stops = {s: sum(e.stop_reason == s for e in expls) for s in ("converged", "label_flip", "max_iters")}
    print(f"explained {len(expls)} RoIs into {out} ({stops})")
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.model)
    edir = Path(args.explanations)
    manifest_path = edir / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    if manifest["config"].get("model_hash") != file_hash(args.model):
        raise DatasetError("explanations were produced by a different model (model hash mismatch)")
    split = manifest["config"].get("split", "test")
    rois, graphs = _graphs_for(model, args.dataset, split)
    rows, pairs, kept, planted, random_kept = [], [], [], [], []
    for r, g in zip(rois, graphs):
        e = read_explanation(edir / f"{r.id}.json", g)
        rand = [random_explanation(g, len(e.kept_nodes), e.subgraph.num_edges, args.seed + s, return_nodes=True)
                for s in range(args.random_seeds)]
        rows.append((g, e.subgraph, [x[0] for x in rand], r.label))
        pairs.append((g, e.subgraph))
        kept.append(e.kept_nodes)
        planted.append(r.planted_relevant)
        random_kept.append(rand[0][1])
    labels = [r.label for r in rois]
    preds = [p.predicted_class for p in predict_many(model, graphs)]
    c = model.num_classes
    rel = {}
    if rois and all(p is not None for p in planted):
        rel = {"explainer": planted_relevance(kept, planted), "random": planted_relevance(random_kept, planted)}
        for v in rel.values():
            v.pop("precision"), v.pop("recall")
    report = build_report(model.class_names or [str(i) for i in range(c)], preds, labels,
                          reduction_stats(pairs, labels, c), ce_report(model, rows, c), rel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report.to_dict(), out / "report.json")
    table = format_table(report)
    (out / "report.txt").write_text(table)
    write_manifest(out / "manifest.json", "evaluate", {"split": split, "random_seeds": args.random_seeds,
                                                       "model_hash": file_hash(args.model)},
                   {"seed": args.seed}, [args.model, args.dataset] + [edir / f"{r.id}.json" for r in rois],
                   [out / "report.json", out / "report.txt"], t0)
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = checks.run_all(args.seed, args.instances)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:36s} max rel err {r.max_rel_error:.3e} (tol {r.tolerance:g})")
    ok = all(r.passed for r in results)
    print(f"{'all checks passed' if ok else 'gradient check FAILED'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgexplain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, choices=(2, 3, 5), default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rois-per-class", type=int, default=140)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--noise-scale", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the GIN classifier")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--classes", type=int, choices=(2, 3, 5))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--readout", choices=("mean", "sum"), default="mean")
    t.add_argument("--k", type=int, default=5)
    t.add_argument("--max-edge-px", type=float, default=50.0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="explain every RoI of a split")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--alpha-mask", type=float, default=0.005)
    e.add_argument("--alpha-entropy", type=float, default=0.1)
    e.add_argument("--explainer-lr", type=float, default=0.01)
    e.add_argument("--max-iters", type=int, default=500)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--workers", type=int, default=0, help="0 means one per core")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="score explanations against the random baseline")
    v.add_argument("--model", required=True)
    v.add_argument("--dataset", required=True)
    v.add_argument("--explanations", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--random-seeds", type=int, default=5)
    v.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _validate(args, parser) -> None:
    positive = ["epochs", "batch_size", "k", "max_iters", "rois_per_class", "feature_dim", "random_seeds",
                "instances"]
    for name in positive:
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    if getattr(args, "workers", 0) < 0:
        parser.error("--workers must be >= 0")
    if hasattr(args, "threshold") and not 0 < args.threshold < 1:
        parser.error("--threshold must lie in (0, 1)")
    for name in ("lr", "explainer_lr", "max_edge_px"):
        if hasattr(args, name) and not getattr(args, name) > 0:
            parser.error(f"--{name.replace('_', '-')} must be > 0")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(args, parser)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (DatasetError, GraphError, ValueError, OSError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
