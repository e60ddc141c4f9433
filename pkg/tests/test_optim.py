import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgst.optim import AdamState, NonFiniteGradientError, adam_step
from mgst.tensor import Parameter


def param(values, name="w"):
    return Parameter(np.asarray(values, dtype=np.float64), name=name)


def test_zero_gradient_leaves_parameters():
    p = param([1.0, -2.0, 3.0])
    before = p.data.copy()
    state = adam_step([p], {"w": np.zeros(3)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 1


def test_first_step_magnitude_is_learning_rate():
    p = param(np.zeros(4))
    lr, eps = 1e-3, 1e-8
    adam_step([p], {"w": np.ones(4)}, AdamState(lr=lr, eps=eps))
    np.testing.assert_allclose(p.data, -lr / (1 + eps), rtol=1e-12)


def test_two_constant_steps_each_move_by_learning_rate():
    p = param([0.5])
    state = AdamState(lr=1e-2)
    g = {"w": np.array([3.7])}
    adam_step([p], g, state)
    after_one = p.data.copy()
    adam_step([p], g, state)
    # bias correction makes both moment estimates exact for a constant gradient
    np.testing.assert_allclose(0.5 - after_one, 1e-2 / (1 + 1e-8 / 3.7), rtol=1e-12)
    np.testing.assert_allclose(after_one - p.data, 1e-2 / (1 + 1e-8 / 3.7), rtol=1e-12)
    assert state.t == 2


def reference_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop version of the bias-corrected update."""
    x, m, v, out = 0.0, 0.0, 0.0, []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(x)
    return out


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12))
def test_matches_scalar_reference(grads):
    p = param([0.0])
    state = AdamState(lr=1e-3)
    for g, expected in zip(grads, reference_adam(grads)):
        adam_step([p], {"w": np.array([g])}, state)
        assert p.data[0] == pytest.approx(expected, rel=1e-12, abs=1e-15)
    assert np.all(state.v["w"] >= 0)


def test_non_finite_gradient_rejected_without_update():
    a, b = param([1.0], "a"), param([2.0], "b")
    state = AdamState(lr=0.1)
    adam_step([a, b], {"a": np.ones(1), "b": np.ones(1)}, state)
    snapshot = (a.data.copy(), b.data.copy(), state.m["a"].copy(), state.t)
    with pytest.raises(NonFiniteGradientError, match="'b'") as err:
        adam_step([a, b], {"a": np.ones(1), "b": np.array([np.nan])}, state)
    assert err.value.param == "b"
    np.testing.assert_array_equal(a.data, snapshot[0])
    np.testing.assert_array_equal(b.data, snapshot[1])
    np.testing.assert_array_equal(state.m["a"], snapshot[2])
    assert state.t == snapshot[3]
    with pytest.raises(NonFiniteGradientError):
        adam_step([a], {"a": np.array([np.inf])}, state)


def test_shape_disagreement_rejected():
    with pytest.raises(ValueError, match="shape"):
        adam_step([param([1.0, 2.0])], {"w": np.ones(3)}, AdamState())


def test_frozen_parameters_do_not_move():
    a, b = param([1.0], "a"), param([1.0], "b")
    state = AdamState(lr=0.1)
    adam_step([a, b], {"a": np.ones(1), "b": np.ones(1)}, state, frozen=frozenset({"b"}))
    assert b.data[0] == 1.0 and a.data[0] < 1.0
    assert "b" not in state.m


def test_grads_keyed_by_parameter():
    p = param([0.0])
    adam_step([p], {p: np.ones(1)}, AdamState(lr=0.5))
    assert p.data[0] == pytest.approx(-0.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_one_step_decreases_convex_quadratic(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4))
    hess = a @ a.T + 0.5 * np.eye(4)
    target = rng.standard_normal(4)
    x = param(rng.standard_normal(4) * 3)

    def loss(v):
        d = v - target
        return 0.5 * d @ hess @ d

    before = loss(x.data)
    grad = hess @ (x.data - target)
    # the first step moves each coordinate by lr, so lr well under the
    # curvature bound is a safe descent step
    lr = 0.1 * np.linalg.norm(grad) / (np.linalg.eigvalsh(hess)[-1] * 4)
    adam_step([x], {"w": grad}, AdamState(lr=lr))
    assert loss(x.data) < before
