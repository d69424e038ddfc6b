import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rspinn.nn import (
    AdamState,
    InputError,
    MlpModel,
    NonFiniteGradientError,
    ShapeError,
    adam_step,
    backward_params,
    forward_batch,
)
from rspinn.sampling import RngStream


def small_model(seed=0, dims=(3, 8, 8, 1), act="tanh"):
    return MlpModel.glorot(dims, RngStream(seed), act)


def test_zero_model_outputs_zero():
    m = MlpModel((4, 5, 1))
    assert np.array_equal(forward_batch(m, np.random.default_rng(0).normal(size=(6, 4))), np.zeros(6))


def test_linear_model_is_affine():
    m = MlpModel((3, 1))
    m.weights[0][0] = [0.5, -1.0, 2.0]
    m.biases[0][0] = 0.25
    x = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    assert np.allclose(m(x), [0.5 - 2.0 + 6.0 + 0.25, 0.25], rtol=0, atol=1e-15)


def test_two_layer_hand_composition():
    m = MlpModel((2, 2, 1))
    m.weights[0][...] = [[0.1, -0.2], [0.3, 0.05]]
    m.biases[0][...] = [0.01, -0.02]
    m.weights[1][...] = [[0.5, -0.4]]
    m.biases[1][...] = [0.1]
    # oracle: mpmath evaluation of 0.5 tanh(-0.29) - 0.4 tanh(0.38) + 0.1
    assert m(np.array([[1.0, 2.0]]))[0] == pytest.approx(-0.186150393366037526, rel=1e-14)


def test_shape_and_input_errors():
    m = small_model()
    with pytest.raises(ShapeError):
        m(np.zeros((2, 4)))
    with pytest.raises(InputError):
        m(np.array([[np.nan, 0.0, 0.0]]))
    with pytest.raises(ShapeError):
        backward_params(m, np.zeros((2, 3)), np.zeros(3))


def test_zero_cotangent_zero_gradient():
    m = small_model()
    g = backward_params(m, np.ones((4, 3)), np.zeros(4))
    assert np.array_equal(g.flat, np.zeros(m.n_params))


def test_linear_model_gradient():
    m = MlpModel((3, 1))
    x = np.array([[1.5, -2.0, 0.5]])
    g = backward_params(m, x, np.ones(1))
    assert np.array_equal(g.weights[0][0], x[0])
    assert g.biases[0][0] == 1.0


@pytest.mark.parametrize("act", ["tanh", "sin", "softplus"])
def test_gradient_matches_finite_differences(act):
    m = small_model(3, act=act)
    x = np.random.default_rng(1).normal(size=(7, 3))
    c = np.random.default_rng(2).normal(size=7)
    g = backward_params(m, x, c).flat
    h = 1e-6
    p0 = m.params.copy()
    for i in range(m.n_params):
        p = p0.copy()
        p[i] += h
        lp = c @ m.with_params(p)(x)
        p[i] -= 2 * h
        lm = c @ m.with_params(p)(x)
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g[i]) <= 1e-5 * max(abs(fd), abs(g[i]), 1e-3)


def test_chunked_and_taped_paths_agree(monkeypatch):
    import rspinn.nn as nn

    m = small_model(4)
    x = np.random.default_rng(3).normal(size=(50, 3))
    c = np.random.default_rng(4).normal(size=50)
    full = backward_params(m, x, c).flat
    out, tape = m.forward_taped(x)
    assert np.array_equal(out, m(x))
    assert np.allclose(backward_params(m, x, c, tape=tape).flat, full, rtol=1e-13, atol=1e-15)
    monkeypatch.setattr(nn, "CHUNK_ROWS", 7)
    assert np.allclose(backward_params(m, x, c).flat, full, rtol=1e-12, atol=1e-14)
    assert np.allclose(m(x), out, rtol=1e-13, atol=1e-15)


def test_segments_sum_to_total():
    m = small_model(5)
    x = np.random.default_rng(5).normal(size=(12, 3))
    c = np.random.default_rng(6).normal(size=12)
    seg = backward_params(m, x, c, segments=4)
    assert seg.shape == (4, m.n_params)
    assert np.allclose(seg.sum(axis=0), backward_params(m, x, c).flat, rtol=1e-12, atol=1e-14)
    assert np.allclose(seg[1], backward_params(m, x[3:6], c[3:6]).flat, rtol=1e-12, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_backward_is_linear_in_cotangents(n, seed):
    r = np.random.default_rng(seed)
    m = small_model(seed % 7)
    x = r.normal(size=(n, 3))
    c1, c2 = r.normal(size=n), r.normal(size=n)
    lhs = backward_params(m, x, c1 + c2).flat
    rhs = backward_params(m, x, c1).flat + backward_params(m, x, c2).flat
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-13)


def test_forward_is_deterministic():
    m = small_model(1)
    x = np.random.default_rng(9).normal(size=(5000, 3))
    assert np.array_equal(m(x), m(x))


def test_glorot_layers_differ_and_respect_limits():
    m = MlpModel.glorot((4, 4, 4, 1), RngStream(0))
    assert not np.allclose(m.weights[0], m.weights[1])
    assert np.all(np.abs(m.weights[1]) <= np.sqrt(6 / 8))
    assert np.array_equal(m.biases[0], np.zeros(4))


def test_adam_zero_gradient_keeps_params():
    m = small_model()
    p0 = m.params.copy()
    s = AdamState(m.n_params)
    adam_step(s, m, np.zeros(m.n_params))
    assert np.array_equal(m.params, p0)
    assert s.step == 1


def test_adam_first_step_moves_by_lr_sign():
    m = small_model()
    p0 = m.params.copy()
    r = np.random.default_rng(0)
    g = r.choice([-1.0, 1.0], m.n_params) * (0.5 + r.random(m.n_params))  # eps << |g|
    s = AdamState(m.n_params, base_lr=1e-3)
    adam_step(s, m, g)
    assert np.allclose(m.params - p0, -1e-3 * np.sign(g), rtol=1e-6, atol=0)
    assert np.all(s.v >= 0)


def test_adam_learning_rate_decay():
    s = AdamState(3, base_lr=1e-3, decay_coefficient=0.9995)
    m = MlpModel((2, 1))
    for _ in range(1000):
        adam_step(s, m, np.ones(3))
    # oracle: mpmath 1e-3 * 0.9995**1000
    assert s.lr == pytest.approx(6.06454822840061564e-4, rel=1e-12)
    assert s.step == 1000


def test_adam_rejects_non_finite():
    m = small_model()
    s = AdamState(m.n_params)
    g = np.zeros(m.n_params)
    g[3] = np.inf
    with pytest.raises(NonFiniteGradientError, match="flat index 3"):
        adam_step(s, m, g)
    assert s.step == 0


def test_linear_schedule_reaches_zero():
    st_ = AdamState(3, base_lr=2e-3, schedule="linear", total_steps=100)
    assert st_.lr == 2e-3
    st_.step = 25
    assert st_.lr == pytest.approx(1.5e-3, rel=1e-15)
    st_.step = 100
    assert st_.lr == 0.0
    st_.step = 150
    assert st_.lr == 0.0
    with pytest.raises(ValueError, match="total_steps"):
        AdamState(3, schedule="linear")
    with pytest.raises(ValueError, match="unknown lr schedule"):
        AdamState(3, schedule="cosine")
