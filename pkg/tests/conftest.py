from dataclasses import dataclass

import numpy as np
import pytest

from cgexplain.data import SynthSpec, generate_synthetic, normalize_features
from cgexplain.graph import GraphConfig
from cgexplain.model import CgnnConfig, train


@dataclass
class Setup:
    dataset: object
    graphs: dict
    model: object
    history: object


def make_setup(spec: SynthSpec, cfg: CgnnConfig) -> Setup:
    ds = normalize_features(generate_synthetic(spec))
    gcfg = GraphConfig()
    graphs = {s: [r.to_graph(gcfg) for r in ds.split(s)] for s in ("train", "val", "test")}
    model, hist = train(graphs["train"], cfg, graphs["val"], num_classes=spec.num_classes,
                        class_names=ds.class_names)
    return Setup(ds, graphs, model, hist)


@pytest.fixture(scope="session")
def small_setup() -> Setup:
    """3-class synthetic set, 42 RoIs per class, briefly trained."""
    return make_setup(SynthSpec(num_classes=3, rois_per_class=42, seed=5), CgnnConfig(epochs=25, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
