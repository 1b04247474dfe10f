import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgexplain import numerics as nx
from cgexplain.checks import check_training_loss, random_graph
from cgexplain.graph import CellGraph, disjoint_union, extract_subgraph
from cgexplain.model import (CgnnConfig, gin_layer, init_model, load_model, model_forward, predict,
                             save_model, train)


def permuted(g: CellGraph, perm: np.ndarray) -> CellGraph:
    """Graph whose node i is node perm[i] of ``g``."""
    inv = np.argsort(perm)
    return CellGraph(g.num_nodes, inv[g.edges], g.node_features[perm], g.centroids_px[perm], g.label)


def _model(d=18, c=3, **kw):
    return init_model(d, c, CgnnConfig(**kw))


def test_gin_single_node_is_mlp():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(1, 4))
    w0, w1 = rng.normal(size=(4, 5)), rng.normal(size=(5, 5))
    b0, b1 = rng.normal(size=5), rng.normal(size=5)
    g = CellGraph(1, [], h, np.zeros((1, 2)))
    out = gin_layer(h, g.adjacency, [w0, b0, w1, b1])
    ref = np.maximum(np.maximum(h @ w0 + b0, 0) @ w1 + b1, 0)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)


def test_gin_zero_features_zero_bias():
    g = random_graph(np.random.default_rng(1), 5, d=4)
    w = np.random.default_rng(2).normal(size=(4, 4))
    out = gin_layer(np.zeros((5, 4)), g.adjacency, [w, np.zeros(4), w, np.zeros(4)])
    np.testing.assert_array_equal(out, 0.0)


def test_gin_triangle_identity_mlp():
    h = np.array([[1.0, 0.0], [2.0, 1.0], [0.5, 3.0]])
    tri = CellGraph(3, [[0, 1], [1, 2], [0, 2]], h, np.zeros((3, 2)))
    eye, zero = np.eye(2), np.zeros(2)
    out = gin_layer(h, tri.adjacency, [eye, zero, eye, zero])
    # every node sees itself plus the other two
    np.testing.assert_array_equal(out, np.tile(h.sum(axis=0), (3, 1)))


def test_gin_epsilon_scales_self_term():
    h = np.array([[1.0, 2.0]])
    g = CellGraph(1, [], h, np.zeros((1, 2)))
    eye, zero = np.eye(2), np.zeros(2)
    np.testing.assert_allclose(gin_layer(h, g.adjacency, [eye, zero, eye, zero], epsilon=0.5), 1.5 * h)


def test_saturated_masks():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 7)
    model = _model()
    base = predict(model, g).logits
    open_ = model_forward(model, g, np.full(7, 30.0))[0].logits
    np.testing.assert_allclose(open_, base, rtol=0, atol=1e-9)
    closed = model_forward(model, g, np.full(7, -30.0))[0].logits
    zero = CellGraph(g.num_nodes, g.edges, np.zeros_like(g.node_features), g.centroids_px)
    np.testing.assert_allclose(closed, predict(model, zero).logits, rtol=0, atol=1e-9)


def test_mask_length_checked():
    g = random_graph(np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        model_forward(_model(), g, np.zeros(3))


@pytest.mark.parametrize("readout", ["mean", "sum"])
@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(readout, n, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    model = _model(readout=readout, seed=seed % 1000)
    perm = rng.permutation(n)
    a = predict(model, g).logits
    b = predict(model, permuted(g, perm)).logits
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_isolated_nodes_have_no_message_terms():
    rng = np.random.default_rng(4)
    g = CellGraph(4, [], rng.normal(size=(4, 18)), np.zeros((4, 2)))
    model = _model(readout="sum")
    p = model.params
    h = g.node_features
    for layer in range(3):
        for j in range(2):
            h = np.maximum(h @ p[f"gin{layer}.W{j}"] + p[f"gin{layer}.b{j}"], 0)
    z = np.maximum(h.sum(axis=0) @ p["cls.W0"] + p["cls.b0"], 0) @ p["cls.W1"] + p["cls.b1"]
    np.testing.assert_allclose(predict(model, g).logits, z, rtol=0, atol=1e-12)


def test_batched_forward_equals_individual():
    rng = np.random.default_rng(5)
    graphs = [random_graph(rng, n) for n in (3, 6, 1)]
    model = _model()
    together = model_forward(model, graphs)
    for g, p in zip(graphs, together):
        np.testing.assert_allclose(p.logits, predict(model, g).logits, rtol=0, atol=1e-12)


def test_predict_properties():
    g = random_graph(np.random.default_rng(6), 8)
    model = _model()
    a, b = predict(model, g), predict(model, g)
    np.testing.assert_array_equal(a.logits, b.logits)
    assert a.predicted_class == int(np.argmax(a.probs))
    assert abs(a.probs.sum() - 1) < 1e-12
    sub, _ = extract_subgraph(g, range(g.num_nodes))
    np.testing.assert_array_equal(predict(model, sub).logits, a.logits)
    with pytest.raises(ValueError):
        predict(model, random_graph(np.random.default_rng(0), 3, d=5))


def test_training_loss_gradient_all_parameters():
    assert check_training_loss(seed=11).passed


def _toy_dataset(rng, n, d=6):
    graphs = []
    for i in range(n):
        label = i % 2
        g = random_graph(rng, int(rng.integers(3, 8)), d=d, label=label)
        feats = g.node_features.copy()
        feats[:, 0] += 3.0 * label
        graphs.append(CellGraph(g.num_nodes, g.edges, feats, g.centroids_px, label))
    return graphs


def test_overfit_single_graph():
    g = random_graph(np.random.default_rng(7), 6, label=1)
    model, hist = train([g], CgnnConfig(epochs=150, lr=1e-2, seed=1), num_classes=2)
    assert hist.train_loss[-1] < 0.01
    assert predict(model, g).predicted_class == 1


def test_train_deterministic_and_best_val_selected():
    rng = np.random.default_rng(8)
    tr, va = _toy_dataset(rng, 40), _toy_dataset(rng, 10)
    cfg = CgnnConfig(epochs=8, seed=3)
    m1, h1 = train(tr, cfg, va)
    m2, h2 = train(tr, cfg, va)
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert h1.train_loss == h2.train_loss
    assert len(h1.val_f1) == 8
    assert h1.best_epoch == int(np.argmax(h1.val_f1))
    assert m1.metadata["best_epoch"] == h1.best_epoch


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train([], CgnnConfig())


def test_train_divergence_reports_epoch():
    g = CellGraph(2, [[0, 1]], np.full((2, 18), 1e308), np.zeros((2, 2)), label=0)  # neighbor sum overflows
    with pytest.raises(FloatingPointError, match="epoch 0"):
        with np.errstate(all="ignore"):
            train([g], CgnnConfig(epochs=2), num_classes=2)


def test_checkpoint_roundtrip(tmp_path):
    g = random_graph(np.random.default_rng(10), 5)
    model = _model(readout="sum", seed=4)
    model.class_names = ["a", "b", "c"]
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.config == model.config and back.class_names == ["a", "b", "c"]
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    np.testing.assert_array_equal(predict(back, g).logits, predict(model, g).logits)
