import json

import numpy as np
import pytest

from cgexplain.data import (DatasetError, SynthSpec, dataset_from_json, dataset_to_json, explanation_from_json,
                            explanation_to_json, generate_synthetic, map_classes, normalize_features,
                            overlay_to_json, parse_dataset, read_explanation, write_dataset, write_explanation)
from cgexplain.explainer import ExplainerConfig, explain
from cgexplain.graph import GraphConfig
from cgexplain.model import CgnnConfig, init_model


def _roi(rid, label=0, feats=((0.0, 1.0), (2.0, 1.0)), w=100, h=100):
    return {"id": rid, "w": w, "h": h, "label": label,
            "nuclei": [{"x": 10.0 * i, "y": 5.0, "f": list(f)} for i, f in enumerate(feats)]}


def _doc(train=None, val=(), test=(), names=("a", "b")):
    return {"class_names": list(names),
            "splits": {"train": list(train or [_roi("r0")]), "val": list(val), "test": list(test)}}


def test_minimal_parse(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps(_doc()))
    ds = parse_dataset(p)
    assert len(ds.train) == 1 and ds.val == [] and ds.class_names == ["a", "b"]
    assert ds.train[0].features.shape == (2, 2)


def test_split_overlap_rejected():
    with pytest.raises(DatasetError, match="split overlap"):
        dataset_from_json(_doc(val=[_roi("r0")]))


@pytest.mark.parametrize("drop", ["w", "label", "nuclei"])
def test_missing_field_names_field_and_id(drop):
    roi = _roi("roi-x")
    del roi[drop]
    with pytest.raises(DatasetError, match=f"roi-x.*{drop}"):
        dataset_from_json(_doc([roi]))


def test_bad_values():
    with pytest.raises(DatasetError, match="label"):
        dataset_from_json(_doc([_roi("r", label=2)]))
    with pytest.raises(DatasetError, match="'f'"):
        dataset_from_json(_doc([_roi("r", feats=((0.0, float("nan")),))]))
    with pytest.raises(DatasetError, match="'f'"):
        dataset_from_json(_doc([_roi("r", feats=((0.0, 1.0), (1.0,)))]))
    with pytest.raises(DatasetError):
        dataset_from_json(_doc([_roi("r", w=0)]))


def test_invalid_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{nope")
    with pytest.raises(DatasetError, match="not valid JSON"):
        parse_dataset(p)


def test_write_parse_roundtrip(tmp_path):
    ds = generate_synthetic(SynthSpec(num_classes=2, rois_per_class=7, seed=3))
    write_dataset(ds, tmp_path / "d.json")
    back = parse_dataset(tmp_path / "d.json")
    assert dataset_to_json(back) == dataset_to_json(ds)
    for a, b in zip(back.all_rois(), ds.all_rois()):
        np.testing.assert_array_equal(a.features, b.features)


def test_normalize_constant_dimension_and_two_point():
    doc = _doc([_roi("r", feats=((0.0, 7.0), (2.0, 7.0)))])
    ds = dataset_from_json(doc)
    assert ds.feature_stats.constant.tolist() == [False, True]
    out = normalize_features(ds)
    np.testing.assert_array_equal(out.train[0].features, [[-1.0, 7.0], [1.0, 7.0]])


def test_normalize_uses_train_statistics_only():
    ds = dataset_from_json(_doc([_roi("r", feats=((0.0,), (2.0,)))], val=[_roi("v", feats=((4.0,),))]))
    out = normalize_features(ds)
    np.testing.assert_array_equal(out.val[0].features, [[3.0]])


def test_normalize_moments_and_idempotent():
    ds = generate_synthetic(SynthSpec(num_classes=3, rois_per_class=7, seed=1))
    once = normalize_features(ds)
    np.testing.assert_allclose(once.feature_stats.mean, 0.0, atol=1e-9)
    np.testing.assert_allclose(once.feature_stats.std, 1.0, atol=1e-9)
    twice = normalize_features(once)
    for a, b in zip(once.all_rois(), twice.all_rois()):
        np.testing.assert_allclose(a.features, b.features, rtol=0, atol=1e-9)


def test_synthetic_deterministic_and_shape():
    spec = SynthSpec(num_classes=3, rois_per_class=14, seed=9)
    a = json.dumps(dataset_to_json(generate_synthetic(spec)), sort_keys=True)
    b = json.dumps(dataset_to_json(generate_synthetic(spec)), sort_keys=True)
    assert a == b
    ds = generate_synthetic(spec)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (30, 6, 6)
    for r in ds.all_rois():
        assert r.features.shape[1] == 16
        if r.label == 0:
            assert r.planted_relevant == ()
        else:
            assert len(r.planted_relevant) >= 8
    other = generate_synthetic(SynthSpec(num_classes=3, rois_per_class=14, seed=10))
    assert json.dumps(dataset_to_json(other), sort_keys=True) != a


def test_synthetic_default_split_sizes():
    spec = SynthSpec()
    n_val = round(spec.rois_per_class * spec.val_fraction)
    assert (spec.rois_per_class - 2 * n_val, n_val) == (100, 20)


def test_synthetic_linearly_separable_from_planted_means():
    """Least-squares probe on the mean planted-nucleus feature separates the classes."""
    ds = generate_synthetic(SynthSpec(num_classes=3, rois_per_class=100, seed=2))
    x, y = [], []
    for r in ds.all_rois():
        f = r.features
        x.append(f[list(r.planted_relevant)].mean(axis=0) if r.planted_relevant else f.mean(axis=0))
        y.append(r.label)
    x = np.c_[np.array(x), np.ones(len(x))]
    y = np.array(y)
    w, *_ = np.linalg.lstsq(x, np.eye(3)[y], rcond=None)
    assert np.mean(np.argmax(x @ w, axis=1) == y) > 0.95


def test_map_classes():
    names = ["N", "B", "A", "D", "I"]
    doc = _doc([_roi(f"r{i}", label=i) for i in range(5)], names=names)
    ds = dataset_from_json(doc)
    three = map_classes(ds, 3)
    assert [r.label for r in three.train] == [0, 0, 1, 2, 2]
    assert three.class_names == ["N+B", "A", "D+I"]
    two = map_classes(ds, 2)
    assert [r.id for r in two.train] == ["r0", "r1", "r3", "r4"]
    assert [r.label for r in two.train] == [0, 0, 1, 1]
    assert map_classes(ds, 5) is ds
    with pytest.raises(DatasetError):
        map_classes(dataset_from_json(_doc()), 3)


@pytest.fixture(scope="module")
def short_explanation():
    ds = normalize_features(generate_synthetic(SynthSpec(num_classes=2, rois_per_class=7, seed=4)))
    g = ds.test[0].to_graph(GraphConfig())
    model = init_model(18, 2, CgnnConfig(seed=2))
    ex = explain(model, g, ExplainerConfig(max_iters=10, convergence_tol=0.0), roi_id=ds.test[0].id)
    return g, ex


def test_explanation_roundtrip(tmp_path, short_explanation):
    g, ex = short_explanation
    assert ex.iterations == len(ex.loss_trace) == 10
    write_explanation(ex, tmp_path / "e.json")
    back = read_explanation(tmp_path / "e.json", g)
    assert back.roi_id == ex.roi_id and back.stop_reason == ex.stop_reason
    np.testing.assert_array_equal(back.mask.logits, ex.mask.logits)
    np.testing.assert_array_equal(back.kept_nodes, ex.kept_nodes)
    np.testing.assert_array_equal(back.kept_edges, ex.kept_edges)
    assert back.loss_trace == ex.loss_trace
    assert back.subgraph.num_nodes == len(ex.kept_nodes)
    assert explanation_to_json(back) == explanation_to_json(ex)


def test_explanation_validation(short_explanation):
    g, ex = short_explanation
    doc = explanation_to_json(ex)
    bad = dict(doc, kept_nodes=[g.num_nodes])
    with pytest.raises(DatasetError, match="out of range"):
        explanation_from_json(bad, g)
    with pytest.raises(DatasetError, match="stop_reason"):
        explanation_from_json(dict(doc, stop_reason="bored"))
    with pytest.raises(DatasetError, match="missing"):
        explanation_from_json({k: v for k, v in doc.items() if k != "loss_trace"})
    with pytest.raises(DatasetError, match="mask length"):
        explanation_from_json(dict(doc, mask_logits=[0.0]), g)


def test_overlay(short_explanation):
    g, ex = short_explanation
    ov = overlay_to_json(ex, g)
    assert [n["index"] for n in ov["nodes"]] == ex.kept_nodes.tolist()
    first = ov["nodes"][0]
    assert (first["x"], first["y"]) == tuple(g.centroids_px[first["index"]])
    assert all(n["sigmoid"] >= 0.5 for n in ov["nodes"]) or "empty_kept_single_node" in ex.flags
