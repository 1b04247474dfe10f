"""
Scoring explanations against a random baseline
==============================================
"""

from cgexplain import (CgnnConfig, ExplainerConfig, SynthSpec, generate_synthetic, normalize_features,
                       random_explanation, train)
from cgexplain.explainer import explain_many
from cgexplain.graph import GraphConfig
from cgexplain.metrics import build_report, ce_report, format_table, reduction_stats
from cgexplain.model import predict_many

ds = normalize_features(generate_synthetic(SynthSpec(num_classes=3, rois_per_class=42, seed=1)))
cfg = GraphConfig()
model, _ = train([r.to_graph(cfg) for r in ds.train], CgnnConfig(epochs=30, seed=1),
                 [r.to_graph(cfg) for r in ds.val], num_classes=3)

graphs = [r.to_graph(cfg) for r in ds.test]
labels = [g.label for g in graphs]
expls = explain_many(model, graphs, [r.id for r in ds.test], ExplainerConfig(max_iters=200))

rows = []
for g, e in zip(graphs, expls):
    rand = [random_explanation(g, len(e.kept_nodes), e.subgraph.num_edges, seed=s) for s in range(5)]
    rows.append((g, e.subgraph, rand, g.label))

preds = [p.predicted_class for p in predict_many(model, graphs)]
report = build_report(ds.class_names, preds, labels,
                      reduction_stats([(g, e.subgraph) for g, e in zip(graphs, expls)], labels, 3),
                      ce_report(model, rows, 3))
print(format_table(report))
