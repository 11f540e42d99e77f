"""Forward and backward numerics for the counting model.

All functions are pure: arrays in, arrays out (NCHW layout throughout).
Convolution is direct cross-correlation (no kernel flip) with zero padding,
evaluated as a strided-window view contracted by einsum; the matching
``*_backward`` functions implement the exact adjoints, which the autograd
tape composes.  Dtype follows the inputs: float32 for training/inference,
float64 for gradient checking.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Inconsistent operand shapes or an invalid layer spec."""


# ---------------------------------------------------------------------------
# specs / parameter bundles
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    """Geometry of one 2D convolution.

    ``padding`` is ``"same"`` (pad = kernel//2, odd kernels only) or an
    explicit (pad_h, pad_w) pair.  Depthwise means groups == in == out.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: object = "same"
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding == "same" and (self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0):
            raise ShapeError(
                f"'same' padding requires odd kernels, got {self.kernel_h}x{self.kernel_w}"
            )

    @property
    def pad(self) -> tuple:
        if self.padding == "same":
            return (self.kernel_h // 2, self.kernel_w // 2)
        if isinstance(self.padding, int):
            return (self.padding, self.padding)
        return tuple(self.padding)

    def kernel_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def out_hw(self, h: int, w: int) -> tuple:
        ph, pw = self.pad
        ho = (h + 2 * ph - self.kernel_h) // self.stride + 1
        wo = (w + 2 * pw - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w} "
                f"stride {self.stride} pad {self.pad}"
            )
        return ho, wo


@dataclass
class BatchNormParams:
    """Per-channel batch norm statistics and affine parameters."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        c = len(self.mean)
        for name in ("var", "gamma", "beta"):
            if len(getattr(self, name)) != c:
                raise ShapeError(f"batchnorm {name} length != {c}")
        if np.any(self.var < 0):
            raise ShapeError("running variance must be >= 0")
        if self.eps <= 0:
            raise ShapeError("eps must be > 0")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, eps: float = 1e-5) -> "BatchNormParams":
        """Stats that make eval-mode BN the identity map (var = 1 - eps)."""
        return cls(
            mean=np.zeros(channels, dtype),
            var=np.full(channels, 1.0 - eps, dtype),
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            eps=eps,
        )


@dataclass
class LinearParams:
    weight: np.ndarray  # [out_features, in_features]
    bias: np.ndarray  # [out_features]

    def __post_init__(self):
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"linear weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_windows(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """View of the padded input as [N, G, Cin_g, Ho, Wo, kh, kw] (no copy)."""
    n = xp.shape[0]
    g = spec.groups
    cin_g = spec.in_channels // g
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, g, cin_g, ho, wo, spec.kernel_h, spec.kernel_w),
        strides=(sn, sc * cin_g, sc, sh * spec.stride, sw * spec.stride, sh, sw),
        writeable=False,
    )


def _pad_input(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.pad
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _check_conv_shapes(x: np.ndarray, kernel: np.ndarray, bias, spec: ConvSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv input {x.shape} does not match spec in_channels={spec.in_channels}")
    if kernel.shape != spec.kernel_shape():
        raise ShapeError(f"conv kernel {kernel.shape} != expected {spec.kernel_shape()}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias {bias.shape} != ({spec.out_channels},)")


def _dense_cols(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """im2col for groups == 1: [N*Ho*Wo, Cin*kh*kw] (contiguous copy)."""
    n, cin = xp.shape[0], spec.in_channels
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(n, cin, ho, wo, spec.kernel_h, spec.kernel_w),
        strides=(sn, sc, sh * spec.stride, sw * spec.stride, sh, sw),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, cin * spec.kernel_h * spec.kernel_w)


def _depthwise_windows(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], spec.in_channels
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, spec.kernel_h, spec.kernel_w),
        strides=(sn, sc, sh * spec.stride, sw * spec.stride, sh, sw),
        writeable=False,
    )


def _is_depthwise(spec: ConvSpec) -> bool:
    return spec.groups == spec.in_channels == spec.out_channels


def conv2d(x: np.ndarray, kernel: np.ndarray, bias, spec: ConvSpec) -> np.ndarray:
    """Grouped 2D cross-correlation with zero padding.

    x [N, Cin, H, W] -> [N, Cout, H', W'] with H' = (H + 2p - k)//stride + 1.
    One semantics, three lowerings: im2col+matmul for dense convs, a direct
    windowed contraction for depthwise, a grouped contraction otherwise.
    """
    _check_conv_shapes(x, kernel, bias, spec)
    n, _, h, w = x.shape
    ho, wo = spec.out_hw(h, w)
    g = spec.groups
    cout = spec.out_channels
    xp = _pad_input(x, spec)
    if g == 1:
        cols = _dense_cols(xp, spec, ho, wo)
        out = cols @ kernel.reshape(cout, -1).T
        out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    elif _is_depthwise(spec):
        win = _depthwise_windows(xp, spec, ho, wo)
        kc = kernel.reshape(cout, spec.kernel_h, spec.kernel_w)
        out = np.einsum("nchwkl,ckl->nchw", win, kc, optimize=True)
    else:
        win = _conv_windows(xp, spec, ho, wo)
        kg = kernel.reshape(g, cout // g, kernel.shape[1], spec.kernel_h, spec.kernel_w)
        out = np.einsum("ngihwkl,goikl->ngohw", win, kg, optimize=True)
        out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_backward(
    gout: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    spec: ConvSpec,
    need_input_grad: bool = True,
    need_bias_grad: bool = True,
):
    """Adjoints of conv2d: (grad_input, grad_kernel, grad_bias)."""
    n, _, h, w = x.shape
    ho, wo = gout.shape[2], gout.shape[3]
    g = spec.groups
    cin_g = spec.in_channels // g
    cout_g = spec.out_channels // g
    s = spec.stride
    ph, pw = spec.pad

    xp = _pad_input(x, spec)
    if g == 1:
        cols = _dense_cols(xp, spec, ho, wo)
        gflat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(-1, spec.out_channels)
        gk = gflat.T @ cols
    elif _is_depthwise(spec):
        win = _depthwise_windows(xp, spec, ho, wo)
        gk = np.einsum("nchwkl,nchw->ckl", win, gout, optimize=True)
    else:
        gout_g = gout.reshape(n, g, cout_g, ho, wo)
        win = _conv_windows(xp, spec, ho, wo)
        gk = np.einsum("ngihwkl,ngohw->goikl", win, gout_g, optimize=True)
    gk = gk.reshape(kernel.shape).astype(kernel.dtype, copy=False)
    gb = gout.sum(axis=(0, 2, 3)) if need_bias_grad else None

    gx = None
    if need_input_grad:
        kg = kernel.reshape(g, cout_g, cin_g, spec.kernel_h, spec.kernel_w)
        if s == 1:
            # stride-1 adjoint is itself a correlation: rotate the kernel 180
            # degrees, swap its channel roles, and pad gout by (k - 1 - p)
            kt = kg[:, :, :, ::-1, ::-1].transpose(0, 2, 1, 3, 4)
            kt = np.ascontiguousarray(kt).reshape(
                spec.in_channels, cout_g, spec.kernel_h, spec.kernel_w)
            adj = ConvSpec(
                spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w,
                stride=1,
                padding=(spec.kernel_h - 1 - ph, spec.kernel_w - 1 - pw),
                groups=g,
            )
            gx = conv2d(gout, kt, None, adj).astype(x.dtype, copy=False)
        else:
            gog = gout.reshape(n, g, cout_g, ho, wo)
            gxp = np.zeros((n, g, cin_g, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
            for kh in range(spec.kernel_h):
                for kw in range(spec.kernel_w):
                    contrib = np.einsum(
                        "ngohw,goi->ngihw", gog, kg[:, :, :, kh, kw], optimize=True)
                    gxp[:, :, :, kh : kh + s * ho : s, kw : kw + s * wo : s] += contrib
            gx = gxp.reshape(n, spec.in_channels, h + 2 * ph, w + 2 * pw)
            gx = np.ascontiguousarray(gx[:, :, ph : ph + h, pw : pw + w], dtype=x.dtype)
    return gx, gk, gb


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, bias, spec: ConvSpec) -> np.ndarray:
    """Nested-loop cross-correlation, for verification only (slow)."""
    _check_conv_shapes(x, kernel, bias, spec)
    n, _, h, w = x.shape
    ho, wo = spec.out_hw(h, w)
    ph, pw = spec.pad
    g = spec.groups
    cin_g = spec.in_channels // g
    cout_g = spec.out_channels // g
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=x.dtype)
    for b in range(n):
        for co in range(spec.out_channels):
            grp = co // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for kh in range(spec.kernel_h):
                            for kw in range(spec.kernel_w):
                                yy = i * spec.stride + kh - ph
                                xx = j * spec.stride + kw - pw
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += x[b, grp * cin_g + ci, yy, xx] * kernel[co, ci, kh, kw]
                    out[b, co, i, j] = acc
            if bias is not None:
                out[b, co] += bias[co]
    return out


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def batchnorm(
    x: np.ndarray,
    params: BatchNormParams,
    mode: str = "eval",
    batch_stats_out: dict = None,
) -> np.ndarray:
    """Channelwise batch normalisation of an NCHW tensor.

    eval: uses running statistics, leaves them untouched.
    train: normalises with the current batch mean / biased variance and
    folds them into the running stats with the configured momentum.
    """
    if x.ndim != 4 or x.shape[1] != len(params.mean):
        raise ShapeError(f"batchnorm input {x.shape} != {len(params.mean)} channels")
    if mode == "eval":
        mu, var = params.mean, params.var
    elif mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))  # biased
        m = params.momentum
        params.mean[...] = (1 - m) * params.mean + m * mu
        params.var[...] = (1 - m) * params.var + m * var
        if batch_stats_out is not None:
            batch_stats_out["mean"] = mu
            batch_stats_out["var"] = var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    rstd = 1.0 / np.sqrt(var.astype(x.dtype) + x.dtype.type(params.eps))
    scale = (params.gamma * rstd).astype(x.dtype)
    shift = (params.beta - params.gamma * mu * rstd).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(
    gout: np.ndarray,
    x: np.ndarray,
    params: BatchNormParams,
    mode: str,
    batch_stats: dict = None,
):
    """(grad_x, grad_gamma, grad_beta) for the corresponding forward call.

    In train mode the normalisation statistics depend on x, so the adjoint
    carries the mean/variance terms; ``batch_stats`` must hold the batch
    mean/var the forward used.
    """
    if mode == "eval":
        rstd = 1.0 / np.sqrt(params.var + params.eps)
        xhat = (x - params.mean[None, :, None, None]) * rstd[None, :, None, None]
        gx = gout * (params.gamma * rstd).astype(x.dtype)[None, :, None, None]
    else:
        mu, var = batch_stats["mean"], batch_stats["var"]
        rstd = 1.0 / np.sqrt(var + params.eps)
        xhat = (x - mu[None, :, None, None]) * rstd[None, :, None, None]
        m = x.shape[0] * x.shape[2] * x.shape[3]
        sum_g = gout.sum(axis=(0, 2, 3))
        sum_gx = (gout * xhat).sum(axis=(0, 2, 3))
        gx = (params.gamma * rstd / m).astype(x.dtype)[None, :, None, None] * (
            m * gout - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None]
        )
    ggamma = (gout * xhat).sum(axis=(0, 2, 3)).astype(params.gamma.dtype, copy=False)
    gbeta = gout.sum(axis=(0, 2, 3)).astype(params.beta.dtype, copy=False)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# pooling / linear / activations / dropout / loss
# ---------------------------------------------------------------------------


def _pool_cuts(extent: int, cells: int) -> list:
    return [(extent * i) // cells for i in range(cells + 1)]


def adaptive_avg_pool(x: np.ndarray, grid: tuple) -> np.ndarray:
    """Average-pool NCHW input onto a (g_h, g_w) grid; cells partition exactly."""
    gh, gw = grid
    n, c, h, w = x.shape
    if gh > h or gw > w:
        raise ShapeError(f"pool grid {grid} larger than input {h}x{w}")
    rows = _pool_cuts(h, gh)
    cols = _pool_cuts(w, gw)
    out = np.empty((n, c, gh, gw), dtype=x.dtype)
    for i in range(gh):
        for j in range(gw):
            out[:, :, i, j] = x[:, :, rows[i] : rows[i + 1], cols[j] : cols[j + 1]].mean(axis=(2, 3))
    return out


def adaptive_avg_pool_backward(gout: np.ndarray, in_hw: tuple, grid: tuple) -> np.ndarray:
    gh, gw = grid
    h, w = in_hw
    n, c = gout.shape[:2]
    rows = _pool_cuts(h, gh)
    cols = _pool_cuts(w, gw)
    gx = np.empty((n, c, h, w), dtype=gout.dtype)
    for i in range(gh):
        for j in range(gw):
            area = (rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])
            gx[:, :, rows[i] : rows[i + 1], cols[j] : cols[j + 1]] = (
                gout[:, :, i : i + 1, j : j + 1] / area
            )
    return gx


def linear(x: np.ndarray, params: LinearParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != params.weight.shape[1]:
        raise ShapeError(f"linear input {x.shape} != in_features {params.weight.shape[1]}")
    return x @ params.weight.T + params.bias


def linear_backward(gout: np.ndarray, x: np.ndarray, params: LinearParams):
    gx = gout @ params.weight
    gw = gout.T @ x
    gb = gout.sum(axis=0)
    return gx, gw.astype(params.weight.dtype, copy=False), gb.astype(params.bias.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(gout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return gout * (x > 0)


def dropout(x: np.ndarray, p: float, rng, mode: str = "train"):
    """Inverted dropout: (output, keep_mask).

    train: each element is zeroed with probability p and survivors are scaled
    by 1/(1-p), so the off mode is a pure identity.  The mask is drawn from
    ``rng`` in row-major order.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if mode == "off" or p == 0.0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ValueError(f"dropout mode must be 'train' or 'off', got {mode!r}")
    u = rng.uniform_array(x.size).reshape(x.shape)
    mask = (u >= p).astype(x.dtype)
    return x * mask / x.dtype.type(1.0 - p), mask


def dropout_backward(gout: np.ndarray, mask: np.ndarray, p: float) -> np.ndarray:
    if p == 0.0:
        return gout
    return gout * mask / gout.dtype.type(1.0 - p)


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> float:
    """Mean smooth-L1: 0.5 d^2/beta for |d| < beta, |d| - 0.5 beta beyond."""
    d = pred - target
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return float(per.mean())


def smooth_l1_backward(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """d(loss)/d(pred); the mean folds in the 1/N factor."""
    d = pred - target
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return (g / d.size).astype(pred.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer / init
# ---------------------------------------------------------------------------


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple:
    """One bias-corrected Adam update, in place over the parameter dict."""
    if not state.m:
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * (g * g)
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params, state


def init_weight(shape: tuple, fan_in: int, rng, dtype=np.float32) -> np.ndarray:
    """He-normal init: Normal(0, sqrt(2/fan_in)) drawn via Box-Muller."""
    n = int(np.prod(shape))
    std = np.sqrt(2.0 / fan_in)
    return (rng.normal_array(n) * std).astype(dtype).reshape(shape)
