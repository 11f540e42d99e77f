import numpy as np
import pytest

from lkcount import autograd as ag
from lkcount import reparam, tensor_io
from lkcount.ops import BatchNormParams, ConvSpec, ShapeError, conv2d
from lkcount.reparam import (
    BranchParams,
    FusedConvParams,
    ParallelBlockParams,
    fold_bn,
    fuse_branches,
    fused_forward,
    pad_kernel,
    parallel_forward,
    random_block,
    reparam_pipeline,
    verify_equivalence,
)
from lkcount.rng import Rng


def _branch(k, channels=2, groups=1, rng=None, dtype=np.float32, bn=None):
    rng = rng or Rng(0)
    spec = ConvSpec(channels, channels, k, k, groups=groups)
    kern = rng.normal_array(channels * (channels // groups) * k * k)
    kern = (kern / np.sqrt((channels // groups) * k * k)).astype(dtype)
    kern = kern.reshape(channels, channels // groups, k, k)
    return BranchParams(kernel=kern, bn=bn or BatchNormParams.identity(channels, dtype), spec=spec)


class TestFoldBn:
    def test_identity_bn_keeps_kernel(self):
        br = _branch(3)
        fused = fold_bn(br)
        np.testing.assert_allclose(fused.kernel, br.kernel, atol=1e-7)
        np.testing.assert_allclose(fused.bias, 0.0, atol=1e-7)

    def test_substitution_example(self):
        # gamma=2, var=1-eps, mean=3, beta=1 -> kernel doubles, bias = -5
        eps = 1e-5
        bn = BatchNormParams(
            mean=np.full(2, 3.0, np.float32),
            var=np.full(2, 1.0 - eps, np.float32),
            gamma=np.full(2, 2.0, np.float32),
            beta=np.full(2, 1.0, np.float32),
            eps=eps,
        )
        br = _branch(3, bn=bn)
        fused = fold_bn(br)
        np.testing.assert_allclose(fused.kernel, 2.0 * br.kernel, rtol=1e-6)
        np.testing.assert_allclose(fused.bias, -5.0, rtol=1e-6)

    def test_random_branch_forward_oracle(self):
        rng = Rng(1)
        for trial in range(20):
            channels = (2, 4, 8)[trial % 3]
            groups = (1, channels)[trial % 2]
            block = random_block((5,), channels, groups, rng)
            br = block.branches[0]
            fused = fold_bn(br)
            x = rng.normal_array(2 * channels * 16 * 16).astype(np.float32)
            x = x.reshape(2, channels, 16, 16)
            from lkcount.ops import batchnorm

            want = batchnorm(conv2d(x, br.kernel, None, br.spec), br.bn, mode="eval")
            got = conv2d(x, fused.kernel, fused.bias, br.spec)
            assert np.max(np.abs(want - got)) <= 1e-5

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            BranchParams(
                kernel=np.zeros((2, 2, 3, 3), np.float32),
                bn=BatchNormParams.identity(3),
                spec=ConvSpec(2, 2, 3, 3),
            )


class TestPadKernel:
    def test_1x1_to_3x3(self):
        out = pad_kernel(np.array([[[[5.0]]]]), 3)
        np.testing.assert_array_equal(out[0, 0], [[0, 0, 0], [0, 5, 0], [0, 0, 0]])

    def test_same_size_unchanged(self):
        k = Rng(2).normal_array(9).reshape(1, 1, 3, 3)
        out = pad_kernel(k, 3)
        np.testing.assert_array_equal(out, k)

    def test_conv_with_padded_kernel_equals_original(self):
        rng = Rng(3)
        x = rng.normal_array(1 * 2 * 10 * 10).astype(np.float32).reshape(1, 2, 10, 10)
        k = rng.normal_array(2 * 2 * 9).astype(np.float32).reshape(2, 2, 3, 3)
        k /= np.sqrt(18.0, dtype=np.float32)
        padded = pad_kernel(k, 7)
        assert padded.shape == (2, 2, 7, 7)
        a = conv2d(x, k, None, ConvSpec(2, 2, 3, 3))
        b = conv2d(x, padded, None, ConvSpec(2, 2, 7, 7))
        assert np.max(np.abs(a - b)) <= 1e-6

    def test_sum_preserved_exactly(self):
        # padding adds literal zeros: the entry multiset (and the exact sum,
        # computed order-independently via fsum) is untouched
        import math

        k = Rng(4).normal_array(2 * 1 * 25).reshape(2, 1, 5, 5)
        padded = pad_kernel(k, 13)
        nonzero = padded[padded != 0.0]
        assert sorted(nonzero.tolist()) == sorted(k.ravel().tolist())
        assert math.fsum(padded.ravel()) == math.fsum(k.ravel())

    def test_border_width(self):
        k = np.ones((1, 1, 3, 3))
        out = pad_kernel(k, 7)
        assert np.all(out[:, :, :2, :] == 0) and np.all(out[:, :, :, :2] == 0)
        assert np.all(out[:, :, 2:5, 2:5] == 1)

    def test_rejects_even_or_shrinking(self):
        with pytest.raises(ShapeError):
            pad_kernel(np.zeros((1, 1, 2, 2)), 5)
        with pytest.raises(ShapeError):
            pad_kernel(np.zeros((1, 1, 5, 5)), 3)


class TestFuseBranches:
    def test_two_deltas_double_the_input(self):
        def delta_branch(k):
            kern = np.zeros((2, 1, k, k), np.float32)
            kern[:, 0, k // 2, k // 2] = 1.0
            return BranchParams(
                kernel=kern, bn=BatchNormParams.identity(2),
                spec=ConvSpec(2, 2, k, k, groups=2),
            )

        block = ParallelBlockParams([delta_branch(7), delta_branch(3)])
        fused = reparam_pipeline(block)
        center = fused.kernel[:, 0, 3, 3]
        np.testing.assert_allclose(center, 2.0, atol=1e-6)
        x = Rng(5).normal_array(1 * 2 * 9 * 9).astype(np.float32).reshape(1, 2, 9, 9)
        out = fused_forward(x, fused, block.spec)
        np.testing.assert_allclose(out, 2.0 * x, atol=1e-5)

    def test_single_branch_is_identity(self):
        f = FusedConvParams(kernel=Rng(6).normal_array(18).astype(np.float32).reshape(2, 1, 3, 3),
                            bias=np.array([1.0, -1.0], np.float32))
        fused = fuse_branches([f])
        np.testing.assert_array_equal(fused.kernel, f.kernel)
        np.testing.assert_array_equal(fused.bias, f.bias)

    def test_depthwise_13_5_forward_oracle(self):
        rng = Rng(7)
        block = random_block((13, 5), 8, 8, rng)
        fused = reparam_pipeline(block)
        diff = verify_equivalence(block, fused, n_trials=5, rng=rng)
        assert diff <= 1e-4

    def test_fusion_linear_in_kernels(self):
        rng = Rng(8)
        block = random_block((7, 3), 4, 1, rng)
        for br in block.branches:
            br.bn = BatchNormParams.identity(4)
        fused1 = reparam_pipeline(block)
        a = np.float32(2.5)
        scaled = ParallelBlockParams([
            BranchParams(kernel=a * br.kernel, bn=BatchNormParams.identity(4), spec=br.spec)
            for br in block.branches
        ])
        fused2 = reparam_pipeline(scaled)
        np.testing.assert_allclose(fused2.kernel, a * fused1.kernel, rtol=1e-5)

    def test_incompatible_channels_rejected(self):
        f1 = FusedConvParams(kernel=np.zeros((2, 1, 5, 5), np.float32), bias=np.zeros(2, np.float32))
        f2 = FusedConvParams(kernel=np.zeros((3, 1, 3, 3), np.float32), bias=np.zeros(3, np.float32))
        with pytest.raises(ShapeError):
            fuse_branches([f1, f2])

    def test_non_finite_fused_rejected(self):
        with pytest.raises(ShapeError):
            FusedConvParams(kernel=np.full((1, 1, 3, 3), np.nan), bias=np.zeros(1))


class TestBlockInvariants:
    def test_branch_sizes_must_strictly_decrease(self):
        with pytest.raises(ShapeError):
            ParallelBlockParams([_branch(3), _branch(3)])
        ParallelBlockParams([_branch(7), _branch(3)])  # fine

    def test_mixed_stride_rejected(self):
        b1 = _branch(7)
        spec = ConvSpec(2, 2, 3, 3, stride=2)
        b2 = BranchParams(kernel=np.zeros((2, 2, 3, 3), np.float32),
                          bn=BatchNormParams.identity(2), spec=spec)
        with pytest.raises(ShapeError):
            ParallelBlockParams([b1, b2])

    def test_non_same_padding_rejected(self):
        spec = ConvSpec(2, 2, 3, 3, padding=0)
        with pytest.raises(ShapeError):
            BranchParams(kernel=np.zeros((2, 2, 3, 3), np.float32),
                         bn=BatchNormParams.identity(2), spec=spec)


class TestEquivalenceProperty:
    @pytest.mark.parametrize("k1,k2", [(7, 3), (13, 5)])
    @pytest.mark.parametrize("channels", [1, 4])
    def test_f32_grid(self, k1, k2, channels):
        rng = Rng(k1 * 100 + channels)
        for groups in {1, channels}:
            block = random_block((k1, k2), channels, groups, rng, np.float32)
            fused = reparam_pipeline(block)
            assert verify_equivalence(block, fused, n_trials=5, rng=rng) <= 1e-4

    def test_f64_tight(self):
        rng = Rng(31)
        block = random_block((31, 5), 4, 4, rng, np.float64)
        fused = reparam_pipeline(block)
        assert verify_equivalence(block, fused, n_trials=5, rng=rng) <= 1e-9

    def test_strided_blocks_also_equivalent(self):
        rng = Rng(9)
        block = random_block((7, 3), 4, 4, rng, stride=2)
        fused = reparam_pipeline(block)
        assert verify_equivalence(block, fused, n_trials=5, rng=rng) <= 1e-4

    def test_parallel_forward_is_branch_sum(self):
        rng = Rng(10)
        block = random_block((5, 3), 2, 1, rng)
        x = rng.normal_array(1 * 2 * 8 * 8).astype(np.float32).reshape(1, 2, 8, 8)
        from lkcount.ops import batchnorm

        want = sum(
            batchnorm(conv2d(x, br.kernel, None, br.spec), br.bn, mode="eval")
            for br in block.branches
        )
        np.testing.assert_allclose(parallel_forward(x, block, mode="eval"), want, atol=1e-6)


class TestPipelineAndGradients:
    def test_identity_bn_pipeline_sums_raw_kernels(self):
        rng = Rng(11)
        block = random_block((7, 3), 3, 3, rng)
        for br in block.branches:
            br.bn = BatchNormParams.identity(3)
        fused = reparam_pipeline(block)
        want = block.branches[0].kernel + pad_kernel(block.branches[1].kernel, 7)
        np.testing.assert_allclose(fused.kernel, want, atol=1e-6)

    def test_gradients_flow_through_fused_forward(self):
        rng = Rng(12)
        block = random_block((5, 3), 2, 2, rng, np.float64)
        fused = reparam_pipeline(block)
        x = ag.Var(rng.normal_array(1 * 2 * 6 * 6).reshape(1, 2, 6, 6), requires_grad=True)
        kv = ag.Var(fused.kernel, requires_grad=True)
        bv = ag.Var(fused.bias, requires_grad=True)
        w = rng.normal_array(1 * 2 * 6 * 6).reshape(1, 2, 6, 6)
        loss = ag.dot_const(ag.conv2d(x, kv, bv, block.spec), w)
        grads = ag.collect_gradients(loss, {"x": x, "kernel": kv, "bias": bv})

        params = {"kernel": fused.kernel.copy(), "bias": fused.bias.copy()}

        def loss_fn():
            return float(np.sum(conv2d(x.value, params["kernel"], params["bias"], block.spec) * w))

        numeric = ag.finite_diff_grad(loss_fn, params)
        assert ag.relative_grad_error(
            {"kernel": grads["kernel"], "bias": grads["bias"]}, numeric) <= 1e-4

    def test_fine_tuning_fused_block_decreases_loss(self):
        # 50 adam steps on a fixed batch: fused conv -> global pool -> channel sum
        rng = Rng(13)
        block = random_block((7, 3), 4, 4, rng)
        fused = reparam_pipeline(block)
        spec = block.spec
        x = rng.normal_array(4 * 4 * 12 * 12).astype(np.float32).reshape(4, 4, 12, 12)
        targets = (rng.uniform_array(4) * 5).astype(np.float32)
        from lkcount.ops import AdamState, adam_step

        params = {"kernel": fused.kernel.copy(), "bias": fused.bias.copy()}
        state = AdamState(lr=1e-2)
        losses = []
        for _ in range(50):
            kv = ag.Var(params["kernel"], requires_grad=True)
            bv = ag.Var(params["bias"], requires_grad=True)
            out = ag.conv2d(ag.Var(x), kv, bv, spec)
            pooled = ag.adaptive_avg_pool(out, (1, 1))  # [4, 4, 1, 1]
            pred = ag.reshape(pooled, (4, 4))
            pred = ag.linear(pred, ag.Var(np.ones((1, 4), np.float32)), ag.Var(np.zeros(1, np.float32)))
            pred = ag.squeeze_last(pred)
            loss = ag.smooth_l1(pred, targets)
            losses.append(loss.value)
            grads = ag.collect_gradients(loss, {"kernel": kv, "bias": bv})
            adam_step(params, grads, state)
        assert losses[-1] < losses[0], f"loss {losses[0]:.4f} -> {losses[-1]:.4f}"


class TestSerialization:
    def test_block_naming_convention(self, tmp_path):
        rng = Rng(14)
        block = random_block((7, 3), 2, 2, rng)
        fused = reparam_pipeline(block)
        path = tmp_path / "blocks.lkc1"
        reparam.save_blocks([block, fused], path)
        entries = tensor_io.load_tensors(path)
        assert "block0.branch0.kernel" in entries
        assert "block0.branch1.bn.mean" in entries
        assert "block1.fused.kernel" in entries
        assert "block1.fused.bias" in entries

    def test_block_round_trip(self, tmp_path):
        rng = Rng(15)
        block = random_block((7, 3), 4, 4, rng)
        path = tmp_path / "b.lkc1"
        reparam.save_blocks([block], path)
        entries = tensor_io.load_tensors(path)
        back = reparam.load_block(entries, 0, block.spec)
        for a, b in zip(block.branches, back.branches):
            np.testing.assert_array_equal(a.kernel, b.kernel)
            np.testing.assert_array_equal(a.bn.mean, b.bn.mean)
            np.testing.assert_array_equal(a.bn.gamma, b.bn.gamma)
        fused_a = reparam_pipeline(block)
        fused_b = reparam_pipeline(back)
        np.testing.assert_array_equal(fused_a.kernel, fused_b.kernel)
