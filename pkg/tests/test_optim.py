import numpy as np
import pytest

from rbp.autodiff import ShapeError
from rbp.optim import SGD, Adam, ParamStore


def test_sgd_single_step():
    params = {"w": np.array([1.0])}
    SGD(lr=0.1).step(params, {"w": np.array([0.5])})
    np.testing.assert_allclose(params["w"], [0.95])


def test_sgd_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0])}
    SGD(lr=0.1).step(params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_sgd_momentum_two_steps_hand_computed():
    # buf1 = g, w1 = w0 - lr*g; buf2 = m*g + g, w2 = w1 - lr*buf2
    params = {"w": np.array([1.0])}
    opt = SGD(lr=0.1, momentum=0.9)
    g = np.array([0.5])
    opt.step(params, {"w": g})
    np.testing.assert_allclose(params["w"], [0.95])
    opt.step(params, {"w": g})
    np.testing.assert_allclose(params["w"], [0.95 - 0.1 * (0.9 * 0.5 + 0.5)])


def test_adam_first_step_matches_hand_formula():
    # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    for g_val in (0.5, -2.0, 1e-3):
        params = {"w": np.array([1.0])}
        g = np.array([g_val])
        Adam(lr=0.1).step(params, {"w": g})
        expected = 1.0 - 0.1 * g_val / (abs(g_val) + 1e-8)
        np.testing.assert_allclose(params["w"], [expected], rtol=1e-12)


def test_adam_first_step_direction_is_minus_sign():
    params = {"w": np.array([0.0, 0.0])}
    Adam(lr=0.01).step(params, {"w": np.array([3.0, -0.2])})
    assert params["w"][0] < 0 and params["w"][1] > 0
    np.testing.assert_allclose(np.abs(params["w"]), 0.01, rtol=1e-6)


def test_adam_deterministic_sequence():
    def run():
        params = {"w": np.linspace(-1, 1, 5)}
        opt = Adam(lr=0.05)
        for t in range(10):
            opt.step(params, {"w": np.sin(params["w"] + t)})
        return params["w"]

    np.testing.assert_array_equal(run(), run())


def test_gradient_shape_mismatch():
    with pytest.raises(ShapeError):
        Adam().step({"w": np.zeros(3)}, {"w": np.zeros(4)})
    with pytest.raises(KeyError):
        SGD().step({"w": np.zeros(3)}, {"v": np.zeros(3)})


def test_param_store_rejects_duplicates_and_counts():
    store = ParamStore()
    store.add("a", np.zeros((2, 3)))
    store.add("b", np.zeros(5))
    assert store.param_count() == 11
    with pytest.raises(ValueError):
        store.add("a", np.zeros(1))
