"""Reverse-mode differentiation over the fixed op set in :mod:`lkcount.ops`.

A tiny tape: each traced op returns a :class:`Var` holding the forward value
and a closure that routes the incoming cotangent to the parents.  This is not
a general autodiff system; only the operations the counting model needs are
traced (conv, batch norm, pooling, linear, relu, dropout, add, reshape,
smooth-L1, and a constant-weight contraction used by diagnostics).
"""

import numpy as np

from . import ops


class GradientError(RuntimeError):
    """A computed gradient is non-finite; message carries the parameter path."""


class Var:
    """Node in the backward graph: a value plus how to push gradients back."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return np.shape(self.value)

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, seed=None):
        """Reverse sweep from this node, accumulating into ``.grad`` fields."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.value) if np.ndim(self.value) else 1.0
        self._accumulate(seed)
        for node in reversed(order):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unary(value, x: Var, pull) -> Var:
    def vjp(g):
        if x.requires_grad:
            x._accumulate(pull(g))

    return Var(value, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# traced ops
# ---------------------------------------------------------------------------


def conv2d(x: Var, kernel: Var, bias, spec: ops.ConvSpec) -> Var:
    bias_v = as_var(bias) if bias is not None else None
    y = ops.conv2d(x.value, kernel.value, bias_v.value if bias_v else None, spec)
    parents = (x, kernel) + ((bias_v,) if bias_v else ())

    def vjp(g):
        gx, gk, gb = ops.conv2d_backward(
            g, x.value, kernel.value, spec,
            need_input_grad=x.requires_grad,
            need_bias_grad=bias_v is not None and bias_v.requires_grad,
        )
        if x.requires_grad:
            x._accumulate(gx)
        if kernel.requires_grad:
            kernel._accumulate(gk)
        if gb is not None:
            bias_v._accumulate(gb)

    return Var(y, _parents=parents, _vjp=vjp)


def batchnorm(x: Var, gamma: Var, beta: Var, bnp: ops.BatchNormParams, mode: str) -> Var:
    """Traced BN; train mode updates ``bnp``'s running stats as a side effect."""
    live = ops.BatchNormParams(
        mean=bnp.mean, var=bnp.var, gamma=gamma.value, beta=beta.value,
        eps=bnp.eps, momentum=bnp.momentum,
    )
    stats = {}
    y = ops.batchnorm(x.value, live, mode=mode, batch_stats_out=stats)
    if mode == "eval":
        # adjoint must see the stats the forward used, not later updates
        stats = {"mean": live.mean.copy(), "var": live.var.copy()}
    frozen = ops.BatchNormParams(
        mean=stats["mean"], var=stats["var"], gamma=gamma.value, beta=beta.value, eps=bnp.eps,
    )

    def vjp(g):
        bn_mode_stats = None if mode == "eval" else stats
        gx, ggamma, gbeta = ops.batchnorm_backward(g, x.value, frozen, mode, bn_mode_stats)
        if x.requires_grad:
            x._accumulate(gx)
        if gamma.requires_grad:
            gamma._accumulate(ggamma)
        if beta.requires_grad:
            beta._accumulate(gbeta)

    return Var(y, _parents=(x, gamma, beta), _vjp=vjp)


def adaptive_avg_pool(x: Var, grid: tuple) -> Var:
    in_hw = x.value.shape[2:]
    y = ops.adaptive_avg_pool(x.value, grid)
    return _unary(y, x, lambda g: ops.adaptive_avg_pool_backward(g, in_hw, grid))


def linear(x: Var, weight: Var, bias: Var) -> Var:
    p = ops.LinearParams(weight.value, bias.value)
    y = ops.linear(x.value, p)

    def vjp(g):
        gx, gw, gb = ops.linear_backward(g, x.value, p)
        if x.requires_grad:
            x._accumulate(gx)
        if weight.requires_grad:
            weight._accumulate(gw)
        if bias.requires_grad:
            bias._accumulate(gb)

    return Var(y, _parents=(x, weight, bias), _vjp=vjp)


def relu(x: Var) -> Var:
    return _unary(ops.relu(x.value), x, lambda g: ops.relu_backward(g, x.value))


def dropout(x: Var, p: float, rng, mode: str) -> Var:
    y, mask = ops.dropout(x.value, p, rng, mode)
    if mode == "off" or p == 0.0:
        return _unary(y, x, lambda g: g)
    return _unary(y, x, lambda g: ops.dropout_backward(g, mask, p))


def add(x: Var, y: Var) -> Var:
    def vjp(g):
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(g)

    return Var(x.value + y.value, _parents=(x, y), _vjp=vjp)


def reshape(x: Var, shape: tuple) -> Var:
    orig = x.value.shape
    return _unary(x.value.reshape(shape), x, lambda g: g.reshape(orig))


def flatten(x: Var) -> Var:
    return reshape(x, (x.value.shape[0], -1))


def squeeze_last(x: Var) -> Var:
    orig = x.value.shape
    return _unary(x.value.reshape(orig[:-1]), x, lambda g: g.reshape(orig))


def smooth_l1(pred: Var, target: np.ndarray, beta: float = 1.0) -> Var:
    y = ops.smooth_l1(pred.value, target, beta)
    return _unary(y, pred, lambda g: g * ops.smooth_l1_backward(pred.value, target, beta))


def dot_const(x: Var, weights: np.ndarray) -> Var:
    """Scalar contraction sum(x * weights) against a constant array."""
    y = float(np.sum(x.value * weights))
    return _unary(y, x, lambda g: g * weights)


# ---------------------------------------------------------------------------
# gradient collection and the finite-difference oracle
# ---------------------------------------------------------------------------


def collect_gradients(loss: Var, named: dict) -> dict:
    """Run backward from ``loss`` and return per-name gradients.

    ``named`` maps parameter path -> leaf Var.  Parameters the loss does not
    depend on get exact zero gradients.  Non-finite entries raise
    :class:`GradientError` naming the offending path.
    """
    loss.backward()
    grads = {}
    for name, var in named.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return grads


def finite_diff_grad(loss_fn, params: dict, h: float = 1e-5) -> dict:
    """Central-difference gradients of ``loss_fn()`` w.r.t. every coordinate.

    ``loss_fn`` must read the (float64) arrays in ``params`` each call; the
    arrays are perturbed in place and restored.  Intended for small parameter
    counts only — cost is two evaluations per scalar coordinate.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn()
            flat[i] = orig - h
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return grads


def relative_grad_error(analytic: dict, numeric: dict) -> float:
    """Worst per-parameter ||a - n|| / max(||a||, ||n||, 1e-6).

    The 1e-6 floor makes the ratio well-defined when a gradient is truly
    zero, where central differences still carry ~1e-11 cancellation noise.
    """
    worst = 0.0
    for name in analytic:
        a = analytic[name].ravel()
        n = numeric[name].ravel()
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-6)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
