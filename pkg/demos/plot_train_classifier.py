"""
Training the GIN classifier on synthetic RoIs
=============================================
"""

import numpy as np

from cgexplain import CgnnConfig, SynthSpec, generate_synthetic, normalize_features, train, weighted_f1
from cgexplain.graph import GraphConfig
from cgexplain.model import predict_many

ds = normalize_features(generate_synthetic(SynthSpec(num_classes=3, rois_per_class=42, seed=1)))
cfg = GraphConfig()
train_g = [r.to_graph(cfg) for r in ds.train]
val_g = [r.to_graph(cfg) for r in ds.val]
test_g = [r.to_graph(cfg) for r in ds.test]
print("train/val/test", len(train_g), len(val_g), len(test_g))

model, hist = train(train_g, CgnnConfig(epochs=30, seed=1), val_g, num_classes=3, class_names=ds.class_names)

# loss curve, coarse
for epoch in range(0, len(hist.train_loss), 5):
    print("epoch %2d  loss %.3f  val F1 %.3f" % (epoch, hist.train_loss[epoch], hist.val_f1[epoch]))
print("kept epoch", hist.best_epoch)

preds = [p.predicted_class for p in predict_many(model, test_g)]
print("test weighted F1 %.3f" % weighted_f1(preds, [g.label for g in test_g], 3))
print("confusion\n", np.histogram2d([g.label for g in test_g], preds, bins=3)[0].astype(int))
