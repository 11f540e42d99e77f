"""Finite-difference verification of every reverse-mode gradient.

Each check builds a tiny float64 instance, contracts the op output against a
fixed random weight array to get a scalar, and compares the tape's gradients
with central differences.  The model check covers the full composition in
both train and eval mode (train-mode BN mutates running stats, so the loss
closure snapshots and restores them between probe evaluations).
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import model as model_mod
from . import ops
from .rng import Rng

TOLERANCE = 1e-4  # max relative error, per-parameter 2-norm


@dataclass
class CheckResult:
    name: str
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err <= TOLERANCE


def _rand(rng, *shape):
    return rng.normal_array(int(np.prod(shape))).reshape(shape)


def _check(name, build, results):
    """build() -> (loss_fn, traced_fn, params dict); compare both gradients."""
    loss_fn, traced_fn, params = build()
    loss = traced_fn()
    grads = ag.collect_gradients(loss, {k: v for k, v in traced_fn.vars.items()})
    numeric = ag.finite_diff_grad(loss_fn, params)
    results.append(CheckResult(name, ag.relative_grad_error(grads, numeric)))


def _op_case(name, params, forward, results):
    """Wire one op: ``forward(vars) -> Var scalar`` over float64 params."""

    def build():
        var_map = {k: ag.Var(v, requires_grad=True) for k, v in params.items()}

        def traced():
            return forward(var_map)

        traced.vars = var_map

        def loss_fn():
            vm = {k: ag.Var(v) for k, v in params.items()}
            return forward(vm).value

        return loss_fn, traced, params

    _check(name, build, results)


def run_op_checks(seed: int = 0) -> list:
    rng = Rng(seed)
    results = []

    # conv2d over stride/groups/kernel variations
    for label, (cin, cout, k, stride, groups, hw) in {
        "conv2d_3x3": (2, 3, 3, 1, 1, 6),
        "conv2d_5x5_stride2": (2, 2, 5, 2, 1, 7),
        "conv2d_depthwise7": (3, 3, 7, 1, 3, 8),
        "conv2d_grouped": (4, 4, 3, 1, 2, 5),
    }.items():
        spec = ops.ConvSpec(cin, cout, k, k, stride=stride, groups=groups)
        ho, wo = spec.out_hw(hw, hw)
        p = {
            "x": _rand(rng, 1, cin, hw, hw),
            "kernel": _rand(rng, *spec.kernel_shape()),
            "bias": _rand(rng, cout),
        }
        w = _rand(rng, 1, cout, ho, wo)
        _op_case(
            label, p,
            lambda vm, spec=spec, w=w: ag.dot_const(
                ag.conv2d(vm["x"], vm["kernel"], vm["bias"], spec), w),
            results,
        )

    # batch norm, both modes
    for mode in ("eval", "train"):
        c = 3
        p = {"x": _rand(rng, 2, c, 4, 4), "gamma": _rand(rng, c) * 0.2 + 1.0,
             "beta": _rand(rng, c) * 0.2}
        mean = _rand(rng, c) * 0.3
        var = np.abs(_rand(rng, c)) + 0.5
        w = _rand(rng, 2, c, 4, 4)

        def bn_forward(vm, mode=mode, mean=mean, var=var, w=w):
            bnp = ops.BatchNormParams(mean=mean.copy(), var=var.copy(),
                                      gamma=vm["gamma"].value, beta=vm["beta"].value)
            return ag.dot_const(ag.batchnorm(vm["x"], vm["gamma"], vm["beta"], bnp, mode), w)

        _op_case(f"batchnorm_{mode}", p, bn_forward, results)

    # adaptive average pooling (non-divisible extents included)
    p = {"x": _rand(rng, 2, 2, 7, 5)}
    w = _rand(rng, 2, 2, 3, 2)
    _op_case("adaptive_avg_pool", p,
             lambda vm, w=w: ag.dot_const(ag.adaptive_avg_pool(vm["x"], (3, 2)), w), results)

    # linear
    p = {"x": _rand(rng, 3, 4), "weight": _rand(rng, 2, 4), "bias": _rand(rng, 2)}
    w = _rand(rng, 3, 2)
    _op_case("linear", p,
             lambda vm, w=w: ag.dot_const(ag.linear(vm["x"], vm["weight"], vm["bias"]), w),
             results)

    # relu (offset away from the kink at 0)
    p = {"x": _rand(rng, 3, 5) + 0.05}
    w = _rand(rng, 3, 5)
    _op_case("relu", p, lambda vm, w=w: ag.dot_const(ag.relu(vm["x"]), w), results)

    # dropout with a replayed mask (fresh Rng from a fixed seed per evaluation)
    p = {"x": _rand(rng, 4, 6)}
    w = _rand(rng, 4, 6)
    _op_case("dropout", p,
             lambda vm, w=w: ag.dot_const(ag.dropout(vm["x"], 0.5, Rng(7), "train"), w),
             results)

    # smooth-L1 with elements on both sides of the kink at |d| = beta
    pred0 = np.array([0.2, -0.4, 2.5, -3.0, 0.9])
    target = np.zeros(5)
    p = {"pred": pred0.copy()}
    _op_case("smooth_l1", p, lambda vm: ag.smooth_l1(vm["pred"], target, 1.0), results)

    return results


def tiny_model_config() -> model_mod.ModelConfig:
    """A <=500-parameter model for end-to-end gradient verification."""
    return model_mod.ModelConfig(
        in_channels=1,
        stem_channels=2,
        stages=[model_mod.StageConfig(channels=2, blocks=1, k_large=5, k_small=3, stride=2)],
        head=model_mod.HeadConfig(pool=(2, 2), hidden=8, dropout=0.25),
        dtype="f64",
    )


def run_model_check(mode: str, seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    mp = model_mod.build_model(tiny_model_config(), rng)
    assert mp.param_count() <= 500
    # nudge every parameter off exact ReLU kinks (zero-init biases put the
    # fresh model precisely at x = 0, where differencing is meaningless)
    for v in mp.params.values():
        v += 0.05 * _rand(rng, *v.shape)
    batch = _rand(rng, 3, 1, 12, 12)
    targets = _rand(rng, 3) * 0.3  # keep the loss in its quadratic region
    buffers0 = {k: v.copy() for k, v in mp.buffers.items()}

    def restore():
        for k, v in buffers0.items():
            mp.buffers[k][...] = v

    loss, grads = model_mod.loss_and_grad(
        mp, batch, targets, Rng(11), beta=1.0, mode=mode)
    restore()

    def loss_fn():
        pred, _, _ = model_mod._traced_forward(mp, ag.Var(batch), mode, Rng(11))
        out = ops.smooth_l1(pred.value, targets, 1.0)
        restore()
        return out

    numeric = ag.finite_diff_grad(loss_fn, mp.params)
    # guard against a vacuous pass (e.g. a dropout mask severing the graph)
    assert np.linalg.norm(numeric["stem.conv.kernel"]) > 0, "degenerate gradcheck instance"
    return CheckResult(f"model_{mode}", ag.relative_grad_error(grads, numeric))


def run_all(seed: int = 0) -> list:
    results = run_op_checks(seed)
    results.append(run_model_check("eval", seed))
    results.append(run_model_check("train", seed))
    return results
