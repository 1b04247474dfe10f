"""
Explaining one RoI with a node mask
===================================

The mask is optimized until it converges, the budget runs out, or the next
step would change the predicted class of the thresholded subgraph.
"""

import numpy as np

from cgexplain import (CgnnConfig, ExplainerConfig, SynthSpec, explain, generate_synthetic, normalize_features,
                       random_explanation, train)
from cgexplain.graph import GraphConfig
from cgexplain.model import predict

ds = normalize_features(generate_synthetic(SynthSpec(num_classes=3, rois_per_class=42, seed=1)))
cfg = GraphConfig()
model, _ = train([r.to_graph(cfg) for r in ds.train], CgnnConfig(epochs=30, seed=1),
                 [r.to_graph(cfg) for r in ds.val], num_classes=3)

roi = next(r for r in ds.test if r.label == 2)
g = roi.to_graph(cfg)
ex = explain(model, g, ExplainerConfig(max_iters=300), roi_id=roi.id)

print(roi.id, "stop:", ex.stop_reason, "after", ex.iterations, "iterations")
print("kept %d of %d nodes, %d of %d edges" % (len(ex.kept_nodes), g.num_nodes,
                                                 ex.subgraph.num_edges, g.num_edges))
print("loss %.3f -> %.3f" % (ex.loss_trace[0], ex.loss_trace[-1]))

# how many kept nodes were planted by the generator
planted = set(roi.planted_relevant)
hits = len(planted & set(ex.kept_nodes.tolist()))
print("planted nodes recovered %d / %d" % (hits, len(planted)))

sig = ex.mask.activation
is_planted = np.isin(np.arange(g.num_nodes), list(planted))
print("mean sigma planted %.2f, background %.2f" % (sig[is_planted].mean(), sig[~is_planted].mean()))

# a random subgraph of the same size, for comparison
rand = random_explanation(g, len(ex.kept_nodes), ex.subgraph.num_edges, seed=0)
print("class probs, explanation", np.round(predict(model, ex.subgraph).probs, 3))
print("class probs, random     ", np.round(predict(model, rand).probs, 3))
