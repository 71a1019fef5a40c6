import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hkrm.nn_core import (
    MlpStack,
    NumericError,
    SgdState,
    ShapeError,
    check_gradients,
    derive_seed,
    grad_check,
    max_relative_error,
    mlp_backward,
    mlp_forward,
    sgd_step,
)


def test_derive_seed_matches_documented_hash():
    digest = hashlib.sha256(b"7/model/attr").digest()
    assert derive_seed(7, "model", "attr") == int.from_bytes(digest[:8], "little")


def test_derive_seed_streams_are_independent_of_siblings():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")


def test_init_is_seeded_per_layer():
    a = MlpStack.init(6, [4, 3, 1], seed=5)
    b = MlpStack.init(6, [4, 3, 1], seed=5)
    c = MlpStack.init(6, [4, 2, 1], seed=5)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(ba, 0.0)
    # changing a later width leaves the first layer's stream untouched
    np.testing.assert_array_equal(a.layers[0][0], c.layers[0][0])


def test_he_uniform_bounds():
    mlp = MlpStack.init(50, [40, 1], seed=0)
    assert np.abs(mlp.layers[0][0]).max() <= np.sqrt(6.0 / 50)
    assert np.abs(mlp.layers[1][0]).max() <= np.sqrt(6.0 / 40)


def test_forward_matches_hand_computation():
    w0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.5, -1.0])
    w1 = np.array([[1.0], [-2.0]])
    b1 = np.array([0.25])
    mlp = MlpStack([(w0, b0), (w1, b1)])
    x = np.array([[1.0, 1.0], [-1.0, 2.0]])
    # row 0: pre = [3.5, -1.5] -> relu [3.5, 0] -> 3.75
    # row 1: pre = [3.5, 1.0]  -> relu [3.5, 1] -> 1.75
    np.testing.assert_allclose(mlp(x), [[3.75], [1.75]])


def test_sigmoid_final_activation_bounds():
    mlp = MlpStack.init(3, [4, 1], seed=1, final_activation="sigmoid")
    out = mlp(np.random.default_rng(0).normal(scale=50, size=(100, 3)))
    assert np.all((out >= 0) & (out <= 1))


def test_shape_errors():
    mlp = MlpStack.init(3, [2, 1], seed=0)
    with pytest.raises(ShapeError):
        mlp(np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        MlpStack([(np.zeros((3, 2)), np.zeros(2)), (np.zeros((3, 1)), np.zeros(1))])
    with pytest.raises(ShapeError):
        MlpStack([])


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("final", ["linear", "sigmoid"])
def test_mlp_gradients_match_finite_differences(seed, final):
    rng = np.random.default_rng(seed)
    mlp = MlpStack.init(5, [7, 4, 1], seed=seed, final_activation=final)
    x = rng.normal(size=(6, 5))
    target = rng.normal(size=(6, 1))

    def loss_fn(out):
        d = out - target
        return 0.5 * float(np.sum(d * d)), d

    assert grad_check(mlp, loss_fn, x, include_input=True) <= 1e-4


def test_backward_returns_named_grads_in_parameter_order():
    mlp = MlpStack.init(3, [2, 1], seed=0)
    out, cache = mlp_forward(mlp, np.ones((2, 3)))
    grads, gin = mlp_backward(mlp, cache, np.ones_like(out))
    assert list(grads) == list(mlp.parameters())
    assert gin.shape == (2, 3)


def test_max_relative_error_floor():
    assert max_relative_error([0.0], [1e-12]) == pytest.approx(1e-4)
    assert max_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_check_gradients_detects_wrong_gradient():
    w = np.array([1.0, 2.0])
    err = check_gradients(lambda: (float(np.sum(w**2)), {"w": 3 * w}), {"w": w})
    assert err > 0.1


def test_sgd_step_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.5])}
    state = SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    sgd_step(p, g, state)
    # v1 = -0.1 * (g + 0.01 p) = [-0.051, -0.048]
    np.testing.assert_allclose(p["w"], [0.949, -2.048])
    sgd_step(p, g, state)
    # v2 = 0.9 v1 - 0.1 (g + 0.01 p1)
    v2 = 0.9 * np.array([-0.051, -0.048]) - 0.1 * (np.array([0.5, 0.5]) + 0.01 * np.array([0.949, -2.048]))
    np.testing.assert_allclose(p["w"], np.array([0.949, -2.048]) + v2)


def test_sgd_zero_learning_rate_leaves_parameters():
    p = {"w": np.array([1.0, 2.0])}
    sgd_step(p, {"w": np.array([5.0, -5.0])}, SgdState(learning_rate=0.0))
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_sgd_rejects_non_finite_gradient_and_names_it():
    p = {"layer0.weight": np.zeros(2)}
    with pytest.raises(NumericError, match="layer0.weight"):
        sgd_step(p, {"layer0.weight": np.array([np.nan, 0.0])}, SgdState())
    np.testing.assert_array_equal(p["layer0.weight"], 0.0)


@pytest.mark.parametrize("kw", [{"learning_rate": -1}, {"momentum": 1.0}, {"weight_decay": -0.1}])
def test_sgd_state_validation(kw):
    with pytest.raises(ValueError):
        SgdState(**kw)


@given(st.floats(0.0, 0.99), st.floats(0.0, 1.0), st.integers(1, 5))
def test_sgd_with_zero_gradient_and_no_decay_is_a_fixed_point(momentum, lr, steps):
    p = {"w": np.array([1.5, -0.5])}
    state = SgdState(lr, momentum, 0.0)
    for _ in range(steps):
        sgd_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.5, -0.5])
