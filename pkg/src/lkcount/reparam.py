"""Structural re-parameterization of parallel conv+BN branches.

A block of parallel convolutions (one large kernel, one or more strictly
smaller ones), each followed by batch norm, collapses into a single
convolution: fold each branch's BN into its kernel and bias, zero-pad the
small kernels to the large shape, and sum.  The fused block is exactly
equivalent in eval mode and becomes the trainable form for fine-tuning.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor_io
from .ops import BatchNormParams, ConvSpec, ShapeError, conv2d
from .rng import Rng


@dataclass
class BranchParams:
    """One bias-free conv branch with its batch norm (the affine part)."""

    kernel: np.ndarray  # [C_out, C_in/groups, k, k], k odd
    bn: BatchNormParams
    spec: ConvSpec

    def __post_init__(self):
        if self.spec.padding != "same":
            raise ShapeError("branch convs must use 'same' padding")
        if self.kernel.shape != self.spec.kernel_shape():
            raise ShapeError(
                f"branch kernel {self.kernel.shape} != spec {self.spec.kernel_shape()}"
            )
        if len(self.bn.mean) != self.spec.out_channels:
            raise ShapeError("branch BN channel count != conv out_channels")


@dataclass
class ParallelBlockParams:
    """Ordered parallel branches; branch 0 holds the largest kernel."""

    branches: list

    def __post_init__(self):
        if not self.branches:
            raise ShapeError("parallel block needs at least one branch")
        first = self.branches[0].spec
        sizes = []
        for br in self.branches:
            s = br.spec
            if (
                s.stride != first.stride
                or s.groups != first.groups
                or s.in_channels != first.in_channels
                or s.out_channels != first.out_channels
            ):
                raise ShapeError("branches must share stride, groups, and channel counts")
            if s.kernel_h != s.kernel_w:
                raise ShapeError("branch kernels must be square")
            sizes.append(s.kernel_h)
        if any(later >= earlier for later, earlier in zip(sizes[1:], sizes[:-1])):
            raise ShapeError(f"branch kernel sizes must strictly decrease, got {sizes}")

    @property
    def spec(self) -> ConvSpec:
        return self.branches[0].spec


@dataclass
class FusedConvParams:
    """Single equivalent kernel and per-output-channel bias."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.kernel)) and np.all(np.isfinite(self.bias))):
            raise ShapeError("fused parameters must be finite")
        if self.kernel.shape[0] != self.bias.shape[0]:
            raise ShapeError("fused bias length != kernel out_channels")


def fold_bn(branch: BranchParams) -> FusedConvParams:
    """Absorb eval-mode BN into the branch conv.

    With s = sqrt(var + eps) per channel: kernel' = (gamma/s) * kernel and
    bias' = beta - mean*gamma/s, so conv(x, kernel') + bias' reproduces
    BN(conv(x, kernel)) for every x.
    """
    bn = branch.bn
    s = np.sqrt(bn.var.astype(np.float64) + bn.eps)
    scale = (bn.gamma / s).astype(branch.kernel.dtype)
    kernel = branch.kernel * scale[:, None, None, None]
    bias = (bn.beta - bn.mean * bn.gamma / s).astype(branch.kernel.dtype)
    return FusedConvParams(kernel=kernel, bias=bias)


def pad_kernel(small: np.ndarray, target_k: int) -> np.ndarray:
    """Zero-pad a [..., k2, k2] kernel to [..., k1, k1], centred."""
    k2 = small.shape[-1]
    if small.shape[-2] != k2:
        raise ShapeError(f"kernel must be square, got {small.shape[-2:]}")
    if k2 % 2 == 0 or target_k % 2 == 0:
        raise ShapeError(f"kernel sizes must be odd, got {k2} -> {target_k}")
    if k2 > target_k:
        raise ShapeError(f"cannot pad kernel of size {k2} down to {target_k}")
    if k2 == target_k:
        return small
    b = (target_k - k2) // 2
    pad = [(0, 0)] * (small.ndim - 2) + [(b, b), (b, b)]
    return np.pad(small, pad)


def fuse_branches(folded: list) -> FusedConvParams:
    """Sum zero-pad-aligned folded kernels; biases add per channel."""
    if not folded:
        raise ShapeError("nothing to fuse")
    k1 = folded[0].kernel.shape[-1]
    lead = folded[0].kernel.shape[:2]
    kernel = np.zeros_like(folded[0].kernel)
    bias = np.zeros_like(folded[0].bias)
    for f in folded:
        if f.kernel.shape[:2] != lead:
            raise ShapeError(
                f"incompatible branch channel layout {f.kernel.shape[:2]} vs {lead}"
            )
        kernel = kernel + pad_kernel(f.kernel, k1)
        bias = bias + f.bias
    return FusedConvParams(kernel=kernel, bias=bias)


def parallel_forward(x: np.ndarray, block: ParallelBlockParams, mode: str = "eval") -> np.ndarray:
    """Sum of per-branch conv -> BN outputs (the multi-scale training form)."""
    from .ops import batchnorm

    out = None
    for br in block.branches:
        y = batchnorm(conv2d(x, br.kernel, None, br.spec), br.bn, mode=mode)
        out = y if out is None else out + y
    return out


def fused_forward(x: np.ndarray, fused: FusedConvParams, spec: ConvSpec) -> np.ndarray:
    """Single-conv form: conv(x, fused kernel) + fused bias."""
    return conv2d(x, fused.kernel, fused.bias, spec)


def reparam_pipeline(block: ParallelBlockParams) -> FusedConvParams:
    """Collapse a (pre-trained) parallel block into its fused conv.

    Runs fold_bn on every branch using running (eval) statistics, then sums
    the pad-aligned results.  The fused kernel and bias are what fine-tuning
    subsequently trains.
    """
    return fuse_branches([fold_bn(br) for br in block.branches])


def fused_spec(block: ParallelBlockParams) -> ConvSpec:
    """Spec of the fused conv (largest branch geometry, bias carried)."""
    return block.spec


def verify_equivalence(
    block: ParallelBlockParams,
    fused: FusedConvParams,
    n_trials: int = 20,
    rng: Rng = None,
    hw: tuple = (16, 16),
    batch: int = 2,
) -> float:
    """Max |parallel - fused| over random inputs; the fusion correctness gate."""
    rng = rng or Rng(0)
    dtype = block.branches[0].kernel.dtype
    spec = block.spec
    worst = 0.0
    for _ in range(n_trials):
        x = rng.normal_array(batch * spec.in_channels * hw[0] * hw[1])
        x = x.astype(dtype).reshape(batch, spec.in_channels, *hw)
        a = parallel_forward(x, block, mode="eval")
        b = fused_forward(x, fused, spec)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def random_block(
    k_sizes: tuple,
    channels: int,
    groups: int,
    rng: Rng,
    dtype=np.float32,
    stride: int = 1,
) -> ParallelBlockParams:
    """Random parallel block with non-trivial BN stats, for tests and demos.

    Kernels are fan-in scaled (as trained weights are), keeping activations
    O(1) so float32 equivalence is judged in a realistic numeric regime.
    """
    branches = []
    for k in k_sizes:
        spec = ConvSpec(channels, channels, k, k, stride=stride, padding="same", groups=groups)
        cin_g = channels // groups
        scale = np.sqrt(2.0 / (cin_g * k * k))
        kern = (rng.normal_array(channels * cin_g * k * k) * scale).astype(dtype)
        kern = kern.reshape(channels, cin_g, k, k)
        bn = BatchNormParams(
            mean=(rng.normal_array(channels) * 0.3).astype(dtype),
            var=(rng.uniform_array(channels) * 0.9 + 0.1).astype(dtype),
            gamma=(rng.normal_array(channels) * 0.2 + 1.0).astype(dtype),
            beta=(rng.normal_array(channels) * 0.2).astype(dtype),
        )
        branches.append(BranchParams(kernel=kern, bn=bn, spec=spec))
    return ParallelBlockParams(branches=branches)


# ---------------------------------------------------------------------------
# serialization (LKC1 naming convention)
# ---------------------------------------------------------------------------


def block_entries(block: ParallelBlockParams, index: int = 0) -> dict:
    """Flatten a block to `block{i}.branch{j}.*` container entries."""
    out = {}
    for j, br in enumerate(block.branches):
        p = f"block{index}.branch{j}"
        out[f"{p}.kernel"] = br.kernel
        out[f"{p}.bn.mean"] = br.bn.mean
        out[f"{p}.bn.var"] = br.bn.var
        out[f"{p}.bn.gamma"] = br.bn.gamma
        out[f"{p}.bn.beta"] = br.bn.beta
    return out


def fused_entries(fused: FusedConvParams, index: int = 0) -> dict:
    return {f"block{index}.fused.kernel": fused.kernel, f"block{index}.fused.bias": fused.bias}


def save_blocks(blocks: list, path) -> None:
    entries = {}
    for i, item in enumerate(blocks):
        if isinstance(item, ParallelBlockParams):
            entries.update(block_entries(item, i))
        else:
            entries.update(fused_entries(item, i))
    tensor_io.save_tensors(entries, path)


def load_block(entries: dict, index: int, spec_proto: ConvSpec) -> ParallelBlockParams:
    """Rebuild a parallel block from container entries.

    ``spec_proto`` supplies stride/groups/channels; per-branch kernel sizes
    come from the stored kernel shapes.
    """
    branches = []
    j = 0
    while f"block{index}.branch{j}.kernel" in entries:
        p = f"block{index}.branch{j}"
        kern = entries[f"{p}.kernel"]
        k = kern.shape[-1]
        spec = ConvSpec(
            spec_proto.in_channels, spec_proto.out_channels, k, k,
            stride=spec_proto.stride, padding="same", groups=spec_proto.groups,
        )
        bn = BatchNormParams(
            mean=entries[f"{p}.bn.mean"],
            var=entries[f"{p}.bn.var"],
            gamma=entries[f"{p}.bn.gamma"],
            beta=entries[f"{p}.bn.beta"],
        )
        branches.append(BranchParams(kernel=kern, bn=bn, spec=spec))
        j += 1
    if not branches:
        raise ShapeError(f"no branches found for block{index}")
    return ParallelBlockParams(branches=branches)
