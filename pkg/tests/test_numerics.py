import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cgexplain import numerics as nx
from cgexplain.checks import check_primitives, primitive_cases


def test_relu_backward_negative_is_zero():
    x = nx.Var(np.array([[-2.0, 3.0]]))
    nx.sum_all(nx.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-50, 50)))
def test_softmax_normalized_and_entropy_bounded(v):
    p = nx.softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    h = float(nx.shannon_entropy(p))
    assert -1e-12 <= h <= math.log(len(v)) + 1e-12


def test_shannon_entropy_examples():
    assert float(nx.shannon_entropy(np.array([0.0, 1.0, 0.0]))) == 0.0
    assert float(nx.shannon_entropy(np.array([0.5, 0.5]))) == pytest.approx(math.log(2), abs=1e-15)
    oracle = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    assert float(nx.shannon_entropy(np.array([0.25, 0.75]))) == pytest.approx(oracle, abs=1e-15)


def test_mean_binary_entropy_examples():
    assert float(nx.mean_binary_entropy(np.full(4, 0.5))) == pytest.approx(math.log(2), abs=1e-15)
    assert float(nx.mean_binary_entropy(np.array([0.0, 1.0, 1.0]))) == pytest.approx(0.0, abs=1e-10)
    one = -(0.1 * math.log(0.1) + 0.9 * math.log(0.9))
    assert float(nx.mean_binary_entropy(np.array([0.1, 0.9]))) == pytest.approx(one, abs=1e-15)
    assert float(nx.mean_binary_entropy(np.array([0.1]))) == pytest.approx(float(nx.mean_binary_entropy(np.array([0.9]))))


def test_shape_errors():
    with pytest.raises(ValueError):
        nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nx.add_bias(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        nx.row_scale(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        nx.kl_divergence(np.ones(2) / 2, np.ones(3) / 3)


def test_kl_zero_p_and_clamped_q_are_finite():
    v = float(nx.kl_divergence(np.array([1.0, 0.0]), np.array([1.0, 0.0])))
    assert v == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(float(nx.kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))))


def test_fanout_accumulates():
    x = nx.Var(np.array([[1.0, 2.0]]))
    y = nx.add(x, x)
    nx.sum_all(nx.add(y, x)).backward()
    np.testing.assert_array_equal(x.grad, [[3.0, 3.0]])


def test_plain_arrays_are_not_taped():
    out = nx.relu(np.array([[1.0, -1.0]]))
    assert isinstance(out, np.ndarray)


def test_every_primitive_matches_finite_differences():
    results = check_primitives(seed=7, instances=50, tol=1e-6)
    assert {r.name.split(":")[1] for r in results} == set(primitive_cases(np.random.default_rng(0)))
    bad = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not bad


def test_grad_check_square():
    def square(x):
        return nx.sum_all(nx.matmul(x, x))

    x = np.array([[3.0]])
    assert nx.analytic_gradient(square, [x])[0][0, 0] == 6.0
    assert nx.numeric_gradient(square, [x])[0][0, 0] == pytest.approx(6.0, abs=1e-7)
    assert nx.grad_check(square, x) < 1e-7


# ---------------------------------------------------------------- Adam


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_adam_matches_scalar_oracle_20_steps():
    grads = [0.7] * 10 + [-0.3 + 0.05 * i for i in range(10)]
    ref = scalar_adam(1.5, grads, lr=0.01)
    state = nx.AdamState(lr=0.01)
    p = [np.array([1.5])]
    for g, r in zip(grads, ref):
        p, state = nx.adam_step(p, [np.array([g])], state)
        assert p[0][0] == pytest.approx(r, abs=1e-15)
    assert state.step == 20


def test_adam_constant_gradient_step_approaches_lr():
    state = nx.AdamState(lr=0.01)
    p = [np.array([0.0])]
    prev = 0.0
    for _ in range(200):
        p, state = nx.adam_step(p, [np.array([2.0])], state)
        step, prev = prev - p[0][0], p[0][0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_zero_grad_only_weight_decay():
    state = nx.AdamState(lr=0.1, weight_decay=0.5)
    p, _ = nx.adam_step([np.array([2.0, -4.0])], [np.zeros(2)], state)
    np.testing.assert_allclose(p[0], [2.0 - 0.1 * 0.5 * 2.0, -4.0 + 0.1 * 0.5 * 4.0], rtol=0, atol=1e-15)


def test_adam_coupled_mode_adds_l2_to_gradient():
    state = nx.AdamState(lr=0.1, weight_decay=0.5, decoupled=False)
    p, _ = nx.adam_step([np.array([2.0])], [np.zeros(1)], state)
    # first Adam step moves by lr * sign(effective gradient)
    assert p[0][0] == pytest.approx(2.0 - 0.1, abs=1e-6)


def test_adam_identical_params_update_identically_and_permute():
    rng = np.random.default_rng(0)
    g = rng.normal(size=5)
    g[3] = g[1]
    x = rng.normal(size=5)
    x[3] = x[1]
    sa, sb = nx.AdamState(lr=0.05, weight_decay=0.01), nx.AdamState(lr=0.05, weight_decay=0.01)
    perm = rng.permutation(5)
    pa, pb = [x], [x[perm]]
    for _ in range(5):
        pa, sa = nx.adam_step(pa, [g], sa)
        pb, sb = nx.adam_step(pb, [g[perm]], sb)
    assert pa[0][1] == pa[0][3]
    np.testing.assert_array_equal(pa[0][perm], pb[0])


def test_adam_nonfinite_gradient_diverges():
    with pytest.raises(nx.DivergenceError, match="diverged"):
        nx.adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], nx.AdamState())
