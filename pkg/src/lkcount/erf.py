"""Effective receptive field measurement via input gradients.

The effective RF of a unit is read off the magnitude of the probe response's
gradient over input pixels.  With zero padding and the traced ops, gradient
support is confined to the nominal receptive field exactly; how the mass
concentrates inside it (summarised by r95, the radius holding 95% of it) is
what distinguishes stacked small kernels from a single large kernel.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import model as model_mod
from .ops import ConvSpec
from .rng import Rng


@dataclass
class ErfReport:
    heatmap: np.ndarray  # [H, W], nonnegative gradient mass per input pixel
    r95: float
    nominal_radius: float
    rf_box: tuple  # (y0, y1, x0, x1) inclusive nominal RF bounds
    center: tuple  # probe centre in input coordinates (y, x)
    depth: int  # conv layers with kernel > 1 on the probe path
    probe: str
    outside_mass: float  # gradient mass outside rf_box (should be exactly 0)


def _rf_box(layers: list, probe_yx: tuple, input_hw: tuple) -> tuple:
    """Map a probe pixel back through (kernel, stride, pad) layers to input."""
    y0 = y1 = probe_yx[0]
    x0 = x1 = probe_yx[1]
    for k, s, p in reversed(layers):
        y0, x0 = y0 * s - p, x0 * s - p
        y1, x1 = y1 * s - p + (k - 1), x1 * s - p + (k - 1)
    h, w = input_hw
    return (max(y0, 0), min(y1, h - 1), max(x0, 0), min(x1, w - 1))


def _radial_stats(heatmap: np.ndarray, center: tuple, box: tuple):
    h, w = heatmap.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - center[0]) ** 2 + (xx - center[1]) ** 2)
    total = heatmap.sum()
    if total <= 0:
        return 0.0, 0.0
    order = np.argsort(dist.ravel(), kind="stable")
    cum = np.cumsum(heatmap.ravel()[order])
    idx = int(np.searchsorted(cum, 0.95 * total))
    r95 = float(dist.ravel()[order[min(idx, order.size - 1)]])
    y0, y1, x0, x1 = box
    inside = np.zeros_like(heatmap, dtype=bool)
    inside[y0 : y1 + 1, x0 : x1 + 1] = True
    outside = float(heatmap[~inside].sum())
    return r95, outside


def _box_radius(box: tuple, center: tuple) -> float:
    y0, y1, x0, x1 = box
    cy, cx = center
    return float(max(
        np.hypot(y - cy, x - cx) for y in (y0, y1) for x in (x0, x1)
    ))


def _finish_report(x: ag.Var, probe_var: ag.Var, layers, probe_yx, hw, probe, depth):
    probe_var.backward()
    grad = x.grad if x.grad is not None else np.zeros_like(x.value)
    heatmap = np.abs(grad[0]).sum(axis=0)
    box = _rf_box(layers, probe_yx, hw)
    center = ((box[0] + box[1]) / 2.0, (box[2] + box[3]) / 2.0)
    r95, outside = _radial_stats(heatmap, center, box)
    return ErfReport(
        heatmap=heatmap,
        r95=r95,
        nominal_radius=_box_radius(box, center),
        rf_box=box,
        center=center,
        depth=depth,
        probe=probe,
        outside_mass=outside,
    )


def measure_erf(mp, input_size: int, probe: str = "feature", seed: int = 0) -> ErfReport:
    """ERF of the trained model on a random input of the given square size.

    probe="feature": channel-mean of the pre-head feature map at its spatial
    centre.  probe="output": the scalar prediction (the pool+head make its
    nominal RF the whole image).
    """
    if probe not in ("feature", "output"):
        raise ValueError(f"probe must be feature|output, got {probe!r}")
    cfg = mp.config
    rng = Rng(seed)
    x_arr = rng.normal_array(cfg.in_channels * input_size * input_size)
    x_arr = x_arr.astype(cfg.np_dtype).reshape(1, cfg.in_channels, input_size, input_size)
    x = ag.Var(x_arr, requires_grad=True)
    pred, feature, _ = model_mod._traced_forward(mp, x, "eval")

    layers = [(3, 2, 1)]  # stem
    depth = 1
    for st in cfg.stages:
        layers.append((3, st.stride, 1))
        depth += 1
        for _ in range(st.blocks):
            layers.append((st.k_large, 1, st.k_large // 2))
            depth += 1
    hw = (input_size, input_size)
    if probe == "output":
        # the pooled head sees the full feature map: nominal RF is the image
        w = np.zeros_like(pred.value)
        w[0] = 1.0
        scalar = ag.dot_const(pred, w)
        scalar.backward()
        grad = x.grad if x.grad is not None else np.zeros_like(x.value)
        heatmap = np.abs(grad[0]).sum(axis=0)
        box = (0, input_size - 1, 0, input_size - 1)
        center = ((input_size - 1) / 2.0, (input_size - 1) / 2.0)
        r95, outside = _radial_stats(heatmap, center, box)
        return ErfReport(heatmap, r95, _box_radius(box, center), box, center,
                         depth, probe, outside)
    fh, fw = feature.value.shape[2:]
    cy, cx = fh // 2, fw // 2
    w = np.zeros_like(feature.value)
    w[0, :, cy, cx] = 1.0 / feature.value.shape[1]
    scalar = ag.dot_const(feature, w)
    return _finish_report(x, scalar, layers, (cy, cx), hw, probe, depth)


def measure_erf_stack(kernels: list, input_size: int, seed: int = 0) -> ErfReport:
    """ERF of a bare conv chain (one (kernel, ConvSpec) pair per layer).

    The probe is the channel-mean response at the spatial centre of the last
    layer's output.  Used to contrast n stacked small kernels against a
    single large kernel of equal nominal RF.
    """
    rng = Rng(seed)
    cin = kernels[0][1].in_channels
    dtype = kernels[0][0].dtype
    x_arr = rng.normal_array(cin * input_size * input_size)
    x_arr = x_arr.astype(dtype).reshape(1, cin, input_size, input_size)
    x = ag.Var(x_arr, requires_grad=True)
    t = x
    layers = []
    depth = 0
    for kern, spec in kernels:
        t = ag.conv2d(t, ag.Var(kern), None, spec)
        ph, _ = spec.pad
        layers.append((spec.kernel_h, spec.stride, ph))
        if spec.kernel_h > 1:
            depth += 1
    fh, fw = t.value.shape[2:]
    cy, cx = fh // 2, fw // 2
    w = np.zeros_like(t.value)
    w[0, :, cy, cx] = 1.0 / t.value.shape[1]
    scalar = ag.dot_const(t, w)
    return _finish_report(x, scalar, layers, (cy, cx), (input_size, input_size),
                          "feature", depth)


def stack_vs_single_comparison(n_layers: int = 4, k_small: int = 3, channels: int = 4,
                               input_size: int = 33, seed: int = 0):
    """r95 of n stacked small kernels vs one large kernel with equal nominal RF.

    Returns (stack report, single report, rows) where rows are CSV-ready
    (variant, depth, nominal_radius, r95) tuples.  The depth scaling of the
    effective RF is reported, never asserted: it is an empirical diagnostic.
    """
    rng = Rng(seed)
    k_single = n_layers * (k_small - 1) + 1
    spec_small = ConvSpec(channels, channels, k_small, k_small)

    def rand_kernel(k):
        arr = rng.normal_array(channels * channels * k * k)
        return (arr / np.sqrt(channels * k * k)).astype(np.float64).reshape(
            channels, channels, k, k)

    stack = [(rand_kernel(k_small), spec_small) for _ in range(n_layers)]
    single = [(rand_kernel(k_single), ConvSpec(channels, channels, k_single, k_single))]
    rep_stack = measure_erf_stack(stack, input_size, seed=seed + 1)
    rep_single = measure_erf_stack(single, input_size, seed=seed + 1)
    rows = [
        (f"stacked_{n_layers}x{k_small}", rep_stack.depth, rep_stack.nominal_radius, rep_stack.r95),
        (f"single_{k_single}", rep_single.depth, rep_single.nominal_radius, rep_single.r95),
    ]
    return rep_stack, rep_single, rows


def radial_profile(report: ErfReport):
    """(radius, cumulative mass fraction) at integer radii, for the CSV."""
    h, w = report.heatmap.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - report.center[0]) ** 2 + (xx - report.center[1]) ** 2)
    total = report.heatmap.sum()
    if total <= 0:
        return [(0, 0.0)]
    rmax = int(np.ceil(dist.max()))
    rows = []
    for r in range(rmax + 1):
        rows.append((r, float(report.heatmap[dist <= r].sum() / total)))
        if rows[-1][1] >= 1.0:
            break
    return rows
