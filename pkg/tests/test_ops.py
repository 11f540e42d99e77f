import numpy as np
import pytest

from lkcount import ops
from lkcount.ops import (
    AdamState,
    BatchNormParams,
    ConvSpec,
    LinearParams,
    ShapeError,
    adam_step,
    adaptive_avg_pool,
    batchnorm,
    conv2d,
    conv2d_reference,
    dropout,
    linear,
    relu,
    smooth_l1,
)
from lkcount.rng import Rng


def _randn(rng, *shape, dtype=np.float64):
    return rng.normal_array(int(np.prod(shape))).astype(dtype).reshape(shape)


class TestConv2d:
    def test_all_ones_overlap_counts(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        k = np.ones((1, 1, 3, 3), np.float32)
        out = conv2d(x, k, None, ConvSpec(1, 1, 3, 3))
        np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_delta_kernel_is_identity(self):
        rng = Rng(1)
        x = _randn(rng, 2, 3, 8, 9, dtype=np.float32)
        k = np.zeros((3, 3, 3, 3), np.float32)
        # per-output-channel delta selecting the same input channel
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = conv2d(x, k, None, ConvSpec(3, 3, 3, 3))
        np.testing.assert_array_equal(out, x)

    def test_depthwise_13x13_matches_nested_loop(self):
        rng = Rng(2)
        spec = ConvSpec(4, 4, 13, 13, groups=4)
        x = _randn(rng, 2, 4, 9, 9)
        k = _randn(rng, 4, 1, 13, 13)
        got = conv2d(x, k, None, spec)
        want = conv2d_reference(x, k, None, spec)
        assert np.max(np.abs(got - want)) < 1e-5

    @pytest.mark.parametrize(
        "cin,cout,k,stride,groups,pad,hw",
        [
            (2, 3, 3, 1, 1, "same", 7),
            (2, 4, 5, 2, 1, "same", 9),
            (4, 4, 7, 1, 4, "same", 8),
            (4, 8, 3, 1, 2, "same", 6),
            (3, 5, 1, 1, 1, "same", 5),
            (2, 2, 3, 3, 1, 0, 10),
            (1, 1, 31, 1, 1, "same", 12),
            (2, 2, 13, 2, 2, "same", 15),
        ],
    )
    def test_matches_nested_loop_grid(self, cin, cout, k, stride, groups, pad, hw):
        # kernels fan-in scaled so outputs are O(1): the absolute tolerance
        # is meaningful only in the numeric regime trained weights live in
        rng = Rng(k * 1000 + cin * 10 + groups)
        spec = ConvSpec(cin, cout, k, k, stride=stride, groups=groups, padding=pad)
        x = _randn(rng, 2, cin, hw, hw, dtype=np.float32)
        kern = _randn(rng, cout, cin // groups, k, k, dtype=np.float32)
        kern /= np.sqrt((cin // groups) * k * k)
        bias = _randn(rng, cout, dtype=np.float32)
        got = conv2d(x, kern, bias, spec)
        want = conv2d_reference(x, kern, bias, spec)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-5

    def test_linearity(self):
        rng = Rng(3)
        spec = ConvSpec(2, 3, 5, 5)
        x = _randn(rng, 1, 2, 8, 8, dtype=np.float32)
        y = _randn(rng, 1, 2, 8, 8, dtype=np.float32)
        k = _randn(rng, 3, 2, 5, 5, dtype=np.float32)
        a, b = np.float32(1.7), np.float32(-0.3)
        lhs = conv2d(a * x + b * y, k, None, spec)
        rhs = a * conv2d(x, k, None, spec) + b * conv2d(y, k, None, spec)
        assert np.max(np.abs(lhs - rhs)) < 1e-5

    def test_output_size_formula(self):
        spec = ConvSpec(1, 1, 3, 3, stride=2, padding=(1, 1))
        assert spec.out_hw(96, 50) == (48, 25)

    def test_rejects_channel_mismatch(self):
        spec = ConvSpec(2, 2, 3, 3)
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 3, 5, 5), np.float32), np.zeros((2, 2, 3, 3), np.float32), None, spec)

    def test_rejects_bad_groups(self):
        with pytest.raises(ShapeError):
            ConvSpec(4, 4, 3, 3, groups=3)

    def test_rejects_even_kernel_same_pad(self):
        with pytest.raises(ShapeError):
            ConvSpec(1, 1, 4, 4, padding="same")


class TestBatchNorm:
    def test_identity_stats_pass_through(self):
        rng = Rng(4)
        x = _randn(rng, 2, 3, 4, 4, dtype=np.float32)
        out = batchnorm(x, BatchNormParams.identity(3), mode="eval")
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_scalar_substitution(self):
        # mean 3, var 1-eps, gamma 2, beta 1 at x=3 -> 1
        eps = 1e-5
        p = BatchNormParams(
            mean=np.array([3.0]), var=np.array([1.0 - eps]),
            gamma=np.array([2.0]), beta=np.array([1.0]), eps=eps,
        )
        x = np.full((1, 1, 1, 1), 3.0)
        assert batchnorm(x, p, mode="eval")[0, 0, 0, 0] == pytest.approx(1.0)

    def test_eval_matches_elementwise_oracle(self):
        rng = Rng(5)
        c = 5
        x = _randn(rng, 3, c, 6, 6)
        p = BatchNormParams(
            mean=_randn(rng, c), var=np.abs(_randn(rng, c)) + 0.1,
            gamma=_randn(rng, c), beta=_randn(rng, c),
        )
        got = batchnorm(x, p, mode="eval")
        want = np.empty_like(x)
        for ci in range(c):
            want[:, ci] = p.gamma[ci] * (x[:, ci] - p.mean[ci]) / np.sqrt(p.var[ci] + p.eps) + p.beta[ci]
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_eval_does_not_mutate_running_stats(self):
        rng = Rng(6)
        p = BatchNormParams.identity(2)
        before = (p.mean.copy(), p.var.copy())
        x = _randn(rng, 2, 2, 3, 3, dtype=np.float32)
        a = batchnorm(x, p, mode="eval")
        b = batchnorm(x, p, mode="eval")
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(p.mean, before[0])
        np.testing.assert_array_equal(p.var, before[1])

    def test_train_uses_biased_batch_stats_and_updates_running(self):
        rng = Rng(7)
        x = _randn(rng, 4, 2, 5, 5)
        p = BatchNormParams(
            mean=np.zeros(2), var=np.ones(2), gamma=np.ones(2), beta=np.zeros(2),
        )
        stats = {}
        out = batchnorm(x, p, mode="train", batch_stats_out=stats)
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # biased
        np.testing.assert_allclose(stats["mean"], mu)
        np.testing.assert_allclose(stats["var"], var)
        np.testing.assert_allclose(p.mean, 0.9 * 0.0 + 0.1 * mu)
        np.testing.assert_allclose(p.var, 0.9 * 1.0 + 0.1 * var)
        want = (x - mu[None, :, None, None]) / np.sqrt(var + p.eps)[None, :, None, None]
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            batchnorm(np.zeros((1, 3, 2, 2)), BatchNormParams.identity(2))

    def test_negative_variance_rejected(self):
        with pytest.raises(ShapeError):
            BatchNormParams(mean=np.zeros(1), var=np.array([-0.1]),
                            gamma=np.ones(1), beta=np.zeros(1))


class TestPooling:
    def test_global_mean(self):
        rng = Rng(8)
        x = _randn(rng, 2, 3, 7, 5)
        out = adaptive_avg_pool(x, (1, 1))
        np.testing.assert_allclose(out[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-12)

    def test_identity_when_grid_equals_input(self):
        rng = Rng(9)
        x = _randn(rng, 1, 2, 4, 4)
        np.testing.assert_array_equal(adaptive_avg_pool(x, (4, 4)), x)

    def test_quadrant_means(self):
        x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
        out = adaptive_avg_pool(x, (2, 2))
        np.testing.assert_array_equal(out[0, 0], [[3.5, 5.5], [11.5, 13.5]])

    def test_mean_preserved_when_divisible(self):
        rng = Rng(10)
        x = _randn(rng, 2, 2, 12, 8)
        out = adaptive_avg_pool(x, (3, 4))
        assert out.mean() == pytest.approx(x.mean(), abs=1e-12)

    def test_grid_larger_than_input_raises(self):
        with pytest.raises(ShapeError):
            adaptive_avg_pool(np.zeros((1, 1, 2, 2)), (3, 3))

    def test_exact_partition(self):
        # every input pixel belongs to exactly one cell: pooled cell sums
        # weighted by cell areas reconstruct the total sum
        rng = Rng(11)
        x = _randn(rng, 1, 1, 7, 9)
        gh, gw = 3, 4
        out = adaptive_avg_pool(x, (gh, gw))
        rows = [(7 * i) // gh for i in range(gh + 1)]
        cols = [(9 * j) // gw for j in range(gw + 1)]
        total = sum(
            out[0, 0, i, j] * (rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])
            for i in range(gh)
            for j in range(gw)
        )
        assert total == pytest.approx(x.sum(), rel=1e-12)


class TestLinearRelu:
    def test_identity_weight(self):
        x = np.eye(4)[:2]
        p = LinearParams(weight=np.eye(4), bias=np.zeros(4))
        np.testing.assert_array_equal(linear(x, p), x)

    def test_zero_weight_constant_bias(self):
        p = LinearParams(weight=np.zeros((3, 5)), bias=np.array([1.0, 2.0, 3.0]))
        out = linear(np.ones((4, 5)), p)
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_matches_matvec_oracle(self):
        rng = Rng(12)
        x = _randn(rng, 3, 6)
        p = LinearParams(weight=_randn(rng, 4, 6), bias=_randn(rng, 4))
        got = linear(x, p)
        want = np.array([[np.dot(p.weight[o], x[n]) + p.bias[o] for o in range(4)] for n in range(3)])
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            linear(np.zeros((2, 3)), LinearParams(weight=np.zeros((4, 6)), bias=np.zeros(4)))

    def test_relu(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


class TestDropout:
    def test_p_zero_identity(self):
        x = np.ones((3, 3), np.float32)
        for mode in ("train", "off"):
            out, mask = dropout(x, 0.0, Rng(0), mode)
            np.testing.assert_array_equal(out, x)
            np.testing.assert_array_equal(mask, np.ones_like(x))

    def test_off_mode_identity(self):
        rng = Rng(13)
        x = _randn(rng, 4, 4, dtype=np.float32)
        out, _ = dropout(x, 0.7, Rng(1), "off")
        np.testing.assert_array_equal(out, x)

    def test_survivor_fraction(self):
        x = np.ones(10**6, np.float32)
        out, mask = dropout(x, 0.5, Rng(2024), "train")
        assert abs(mask.mean() - 0.5) < 0.002
        # inverted scaling: survivors are 1/(1-p)
        survivors = out[mask > 0]
        np.testing.assert_allclose(survivors, 2.0, atol=1e-6)

    def test_deterministic_given_seed(self):
        x = np.ones((100,), np.float32)
        a, _ = dropout(x, 0.3, Rng(5), "train")
        b, _ = dropout(x, 0.3, Rng(5), "train")
        np.testing.assert_array_equal(a, b)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            dropout(np.zeros(2), 1.0, Rng(0), "train")


class TestSmoothL1:
    def test_zero_at_zero(self):
        assert smooth_l1(np.array([3.0]), np.array([3.0])) == 0.0

    def test_quadratic_region(self):
        assert smooth_l1(np.array([0.5]), np.array([0.0]), beta=1.0) == pytest.approx(0.125)

    def test_linear_region(self):
        assert smooth_l1(np.array([2.0]), np.array([0.0]), beta=1.0) == pytest.approx(1.5)

    def test_continuity_and_slope_at_kink(self):
        beta = 1.0
        eps = 1e-8
        lo = smooth_l1(np.array([beta - eps]), np.array([0.0]), beta)
        hi = smooth_l1(np.array([beta + eps]), np.array([0.0]), beta)
        at = smooth_l1(np.array([beta]), np.array([0.0]), beta)
        assert abs(lo - at) < 1e-7 and abs(hi - at) < 1e-7
        # one-sided slopes both equal 1 at |d| = beta
        h = 1e-6
        left = (at - smooth_l1(np.array([beta - h]), np.array([0.0]), beta)) / h
        right = (smooth_l1(np.array([beta + h]), np.array([0.0]), beta) - at) / h
        assert left == pytest.approx(1.0, abs=1e-4)
        assert right == pytest.approx(1.0, abs=1e-4)

    def test_mean_over_batch(self):
        pred = np.array([0.5, 2.0])
        target = np.zeros(2)
        assert smooth_l1(pred, target) == pytest.approx((0.125 + 1.5) / 2)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"w": np.array([1.0, -2.0])}
        before = p["w"].copy()
        adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
        np.testing.assert_array_equal(p["w"], before)

    def test_first_step_magnitude(self):
        # bias correction makes |update| ~= lr for any constant gradient
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([7.3])}, AdamState(lr=0.01))
        assert abs(p["w"][0] + 0.01) < 1e-6

    def test_converges_on_quadratic(self):
        p = {"w": np.array([1.0])}
        state = AdamState(lr=0.1)
        for _ in range(100):
            adam_step(p, {"w": 2.0 * p["w"]}, state)
        assert abs(p["w"][0]) < 0.1

    def test_state_counts_steps(self):
        p = {"w": np.zeros(1)}
        state = AdamState(lr=0.1)
        for i in range(3):
            adam_step(p, {"w": np.ones(1)}, state)
        assert state.t == 3
