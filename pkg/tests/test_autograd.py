import numpy as np
import pytest

from lkcount import autograd as ag
from lkcount import gradcheck, model as model_mod, ops
from lkcount.rng import Rng


def test_every_op_matches_finite_differences():
    for result in gradcheck.run_op_checks(seed=0):
        assert result.ok, f"{result.name}: rel_err={result.rel_err:.3e}"


@pytest.mark.parametrize("mode", ["eval", "train"])
def test_tiny_model_matches_finite_differences(mode):
    result = gradcheck.run_model_check(mode, seed=0)
    assert result.ok, f"rel_err={result.rel_err:.3e}"


def test_unused_parameter_gets_exact_zero_gradient():
    x = ag.Var(np.array([[1.0, 2.0]]), requires_grad=True)
    unused = ag.Var(np.array([5.0]), requires_grad=True)
    loss = ag.smooth_l1(ag.flatten(x), np.array([0.0, 0.0]))
    grads = ag.collect_gradients(loss, {"x": x, "unused": unused})
    np.testing.assert_array_equal(grads["unused"], np.zeros(1))
    assert np.any(grads["x"] != 0)


def test_single_linear_layer_closed_form():
    # quadratic region of smooth-L1: dL/dW = (pred - target)/beta * x / N
    rng = Rng(2)
    x_arr = rng.normal_array(3 * 4).reshape(3, 4)
    w = ag.Var(rng.normal_array(4).reshape(1, 4) * 0.1, requires_grad=True)
    b = ag.Var(np.zeros(1), requires_grad=True)
    target = np.zeros(3)
    pred = ag.squeeze_last(ag.linear(ag.Var(x_arr), w, b))
    d = pred.value - target
    assert np.all(np.abs(d) < 1.0), "instance must stay in the quadratic region"
    loss = ag.smooth_l1(pred, target, beta=1.0)
    grads = ag.collect_gradients(loss, {"w": w, "b": b})
    want_w = (d[:, None] * x_arr).sum(axis=0, keepdims=True) / 3.0
    np.testing.assert_allclose(grads["w"], want_w, atol=1e-12)
    np.testing.assert_allclose(grads["b"], [d.sum() / 3.0], atol=1e-12)


def test_gradient_accumulates_over_shared_use():
    x = ag.Var(np.array([2.0]), requires_grad=True)
    y = ag.add(x, x)  # dy/dx = 2
    loss = ag.dot_const(y, np.array([1.0]))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_residual_graph_gradients():
    rng = Rng(3)
    x = ag.Var(rng.normal_array(8).reshape(1, 2, 2, 2), requires_grad=True)
    k = ag.Var(rng.normal_array(4 * 9).reshape(2, 2, 3, 3) * 0.1, requires_grad=True)
    y = ag.add(x, ag.conv2d(x, k, None, ops.ConvSpec(2, 2, 3, 3)))
    w = rng.normal_array(8).reshape(1, 2, 2, 2)
    loss = ag.dot_const(y, w)
    loss.backward()
    assert x.grad is not None and k.grad is not None
    # identity branch contributes w directly
    gk_only = ops.conv2d_backward(w, x.value, k.value, ops.ConvSpec(2, 2, 3, 3))[0]
    np.testing.assert_allclose(x.grad, w + gk_only, atol=1e-12)


def test_non_finite_gradient_flagged_with_path():
    x = ag.Var(np.array([1.0]), requires_grad=True)
    y = ag.Var(np.array([np.inf]), _parents=(x,), _vjp=lambda g: x._accumulate(g * np.inf))
    y.requires_grad = True
    with pytest.raises(ag.GradientError, match="badparam"):
        ag.collect_gradients(y, {"badparam": x})


def test_finite_diff_grad_on_quadratic():
    params = {"w": np.array([1.0, -2.0, 3.0])}

    def loss_fn():
        return float((params["w"] ** 2).sum())

    grads = ag.finite_diff_grad(loss_fn, params)
    np.testing.assert_allclose(grads["w"], 2 * params["w"], atol=1e-8)


def test_dropout_mask_replay_in_backward():
    rng_mask = Rng(77)
    x = ag.Var(np.ones((2, 8)), requires_grad=True)
    y = ag.dropout(x, 0.5, rng_mask, "train")
    loss = ag.dot_const(y, np.ones((2, 8)))
    loss.backward()
    # gradient is exactly the scaled keep-mask: kept entries 2.0, dropped 0
    _, mask = ops.dropout(np.ones((2, 8)), 0.5, Rng(77), "train")
    np.testing.assert_array_equal(x.grad, mask * 2.0)


def test_loss_and_grad_covers_every_parameter(small_model_config):
    rng = Rng(5)
    mp = model_mod.build_model(small_model_config, rng)
    batch = rng.normal_array(2 * 1 * 32 * 32).astype(np.float32).reshape(2, 1, 32, 32)
    targets = np.array([3.0, 5.0], np.float32)
    loss, grads = model_mod.loss_and_grad(mp, batch, targets, Rng(6))
    assert set(grads) == set(mp.params)
    assert np.isfinite(loss)
