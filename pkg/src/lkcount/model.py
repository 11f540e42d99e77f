"""The count-regression model: large-kernel depthwise backbone + scalar head.

Architecture: a strided 3x3 stem, then stages of shape-preserving blocks.
Each block runs a depthwise large-kernel conv in parallel with a strictly
smaller depthwise conv (both BN'd, summed), a 1x1 expansion conv + BN + ReLU,
a 1x1 projection conv, and a residual connection.  The parallel depthwise
pair can be collapsed (:func:`fuse_model`) into a single kernel+bias via
:mod:`lkcount.reparam` without changing eval predictions.

Head: adaptive average pool -> flatten -> ReLU -> linear -> ReLU ->
dropout -> linear -> one scalar per image.  Dropout stays active in "mc"
mode so repeated forwards sample a predictive distribution.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import reparam, tensor_io
from .ops import BatchNormParams, ConvSpec, ShapeError, init_weight
from .rng import Rng

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class StageConfig:
    channels: int
    blocks: int
    k_large: int
    k_small: int
    stride: int = 2

    def __post_init__(self):
        if self.k_large <= self.k_small:
            raise ShapeError(f"k_large {self.k_large} must exceed k_small {self.k_small}")
        if self.k_large % 2 == 0 or self.k_small % 2 == 0:
            raise ShapeError("block kernels must be odd")


@dataclass
class HeadConfig:
    pool: tuple = (3, 3)
    hidden: int = 128
    dropout: float = 0.5


@dataclass
class ModelConfig:
    in_channels: int = 1
    stem_channels: int = 8
    stages: list = field(default_factory=list)
    head: HeadConfig = field(default_factory=HeadConfig)
    block_mode: str = "parallel"  # "parallel" | "fused"
    dw_branches: int = 2  # 1 drops the small parallel branch (ablation variants)
    expansion: int = 2
    dtype: str = "f32"

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        self.head.pool = tuple(self.head.pool)
        if self.block_mode not in ("parallel", "fused"):
            raise ShapeError(f"block_mode must be parallel|fused, got {self.block_mode!r}")
        if self.dw_branches not in (1, 2):
            raise ShapeError(f"dw_branches must be 1 or 2, got {self.dw_branches}")
        if self.dtype not in _DTYPES:
            raise ShapeError(f"dtype must be f32|f64, got {self.dtype!r}")

    def branch_kernels(self, stage: "StageConfig") -> tuple:
        return (stage.k_large, stage.k_small)[: self.dw_branches]

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def feature_channels(self) -> int:
        return self.stages[-1].channels if self.stages else self.stem_channels

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def desk_model_config() -> ModelConfig:
    """Small configuration sized for CPU experiments (< 2M parameters)."""
    return ModelConfig(
        in_channels=1,
        stem_channels=8,
        stages=[
            StageConfig(channels=16, blocks=2, k_large=13, k_small=5, stride=2),
            StageConfig(channels=32, blocks=2, k_large=13, k_small=5, stride=2),
        ],
        head=HeadConfig(pool=(3, 3), hidden=128, dropout=0.5),
    )


def paper_model_config() -> ModelConfig:
    """Fidelity-leaning configuration (384px inputs, (9,9) pooling)."""
    return ModelConfig(
        in_channels=3,
        stem_channels=32,
        stages=[
            StageConfig(channels=64, blocks=2, k_large=31, k_small=5, stride=2),
            StageConfig(channels=128, blocks=2, k_large=29, k_small=5, stride=2),
            StageConfig(channels=256, blocks=2, k_large=27, k_small=5, stride=2),
        ],
        head=HeadConfig(pool=(9, 9), hidden=128, dropout=0.5),
    )


@dataclass
class ModelParams:
    """Named parameter tensors (trainable) and BN running-stat buffers."""

    config: ModelConfig
    params: dict
    buffers: dict

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def clone(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_model(config: ModelConfig, rng: Rng) -> ModelParams:
    """Initialise all tensors (He-normal convs/linears, identity-affine BN)."""
    dt = config.np_dtype
    params: dict = {}
    buffers: dict = {}

    def add_conv(name, cin, cout, k, groups=1):
        cin_g = cin // groups
        params[f"{name}.kernel"] = init_weight((cout, cin_g, k, k), cin_g * k * k, rng, dt)

    def add_bn(name, c):
        params[f"{name}.gamma"] = np.ones(c, dt)
        params[f"{name}.beta"] = np.zeros(c, dt)
        buffers[f"{name}.mean"] = np.zeros(c, dt)
        buffers[f"{name}.var"] = np.ones(c, dt)

    add_conv("stem.conv", config.in_channels, config.stem_channels, 3)
    add_bn("stem.bn", config.stem_channels)
    prev = config.stem_channels
    for si, st in enumerate(config.stages):
        add_conv(f"stage{si}.trans.conv", prev, st.channels, 3)
        add_bn(f"stage{si}.trans.bn", st.channels)
        for bi in range(st.blocks):
            p = f"stage{si}.block{bi}"
            if config.block_mode == "parallel":
                for j, k in enumerate(config.branch_kernels(st)):
                    add_conv(f"{p}.dw.branch{j}", st.channels, st.channels, k, groups=st.channels)
                    add_bn(f"{p}.dw.branch{j}.bn", st.channels)
            else:
                add_conv(f"{p}.dw.fused", st.channels, st.channels, st.k_large, groups=st.channels)
                params[f"{p}.dw.fused.bias"] = np.zeros(st.channels, dt)
            hidden = st.channels * config.expansion
            add_conv(f"{p}.pw1", st.channels, hidden, 1)
            add_bn(f"{p}.pw1.bn", hidden)
            add_conv(f"{p}.pw2", hidden, st.channels, 1)
        prev = st.channels
    gh, gw = config.head.pool
    feat = config.feature_channels() * gh * gw
    params["head.fc1.weight"] = init_weight((config.head.hidden, feat), feat, rng, dt)
    params["head.fc1.bias"] = np.zeros(config.head.hidden, dt)
    params["head.fc2.weight"] = init_weight((1, config.head.hidden), config.head.hidden, rng, dt)
    params["head.fc2.bias"] = np.zeros(1, dt)
    return ModelParams(config=config, params=params, buffers=buffers)


def min_input_size(config: ModelConfig) -> tuple:
    """Smallest (H, W) the stem strides and pool grid admit."""

    def back(m, stride):
        # same-pad conv with stride s yields ceil(H/s) outputs
        return stride * (m - 1) + 1

    gh, gw = config.head.pool
    h, w = gh, gw
    for st in reversed(config.stages):
        h, w = back(h, st.stride), back(w, st.stride)
    return back(h, 2), back(w, 2)


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------


def _bn_bundle(mp, pv, name):
    return (
        pv[f"{name}.gamma"],
        pv[f"{name}.beta"],
        BatchNormParams(
            mean=mp.buffers[f"{name}.mean"],
            var=mp.buffers[f"{name}.var"],
            gamma=pv[f"{name}.gamma"].value,
            beta=pv[f"{name}.beta"].value,
        ),
    )


def _traced_forward(mp: ModelParams, x: ag.Var, mode: str, rng: Rng = None):
    """Build the graph; returns (predictions, pre-head feature, param Vars)."""
    if mode not in ("train", "eval", "mc"):
        raise ValueError(f"mode must be train|eval|mc, got {mode!r}")
    cfg = mp.config
    n, c, h, w = x.value.shape
    if c != cfg.in_channels:
        raise ShapeError(f"input has {c} channels, model expects {cfg.in_channels}")
    mh, mw = min_input_size(cfg)
    if h < mh or w < mw:
        raise ShapeError(f"input {h}x{w} below model minimum {mh}x{mw}")
    if mode in ("train", "mc") and rng is None and cfg.head.dropout > 0:
        raise ValueError(f"mode {mode!r} needs an rng for dropout")
    bn_mode = "train" if mode == "train" else "eval"
    drop_mode = "off" if mode == "eval" else "train"
    pv = {k: ag.Var(v, requires_grad=True) for k, v in mp.params.items()}

    def conv_bn_relu(t, name, spec):
        t = ag.conv2d(t, pv[f"{name}.conv.kernel"], None, spec)
        g, b, bnp = _bn_bundle(mp, pv, f"{name}.bn")
        return ag.relu(ag.batchnorm(t, g, b, bnp, bn_mode))

    t = conv_bn_relu(x, "stem", ConvSpec(cfg.in_channels, cfg.stem_channels, 3, 3, stride=2))
    prev = cfg.stem_channels
    for si, st in enumerate(cfg.stages):
        t = conv_bn_relu(t, f"stage{si}.trans", ConvSpec(prev, st.channels, 3, 3, stride=st.stride))
        ch = st.channels
        for bi in range(st.blocks):
            p = f"stage{si}.block{bi}"
            if cfg.block_mode == "parallel":
                dw = None
                for j, k in enumerate(cfg.branch_kernels(st)):
                    spec = ConvSpec(ch, ch, k, k, groups=ch)
                    y = ag.conv2d(t, pv[f"{p}.dw.branch{j}.kernel"], None, spec)
                    g, b, bnp = _bn_bundle(mp, pv, f"{p}.dw.branch{j}.bn")
                    y = ag.batchnorm(y, g, b, bnp, bn_mode)
                    dw = y if dw is None else ag.add(dw, y)
            else:
                spec = ConvSpec(ch, ch, st.k_large, st.k_large, groups=ch)
                dw = ag.conv2d(t, pv[f"{p}.dw.fused.kernel"], pv[f"{p}.dw.fused.bias"], spec)
            hidden = ch * cfg.expansion
            y = ag.conv2d(dw, pv[f"{p}.pw1.kernel"], None, ConvSpec(ch, hidden, 1, 1))
            g, b, bnp = _bn_bundle(mp, pv, f"{p}.pw1.bn")
            y = ag.relu(ag.batchnorm(y, g, b, bnp, bn_mode))
            y = ag.conv2d(y, pv[f"{p}.pw2.kernel"], None, ConvSpec(hidden, ch, 1, 1))
            t = ag.add(t, y)  # shape-preserving block, residual always applies
        prev = ch
    feature = t

    t = ag.adaptive_avg_pool(t, cfg.head.pool)
    t = ag.relu(ag.flatten(t))
    t = ag.linear(t, pv["head.fc1.weight"], pv["head.fc1.bias"])
    t = ag.relu(t)
    t = ag.dropout(t, cfg.head.dropout, rng, drop_mode)
    t = ag.linear(t, pv["head.fc2.weight"], pv["head.fc2.bias"])
    pred = ag.squeeze_last(t)
    return pred, feature, pv


def forward(mp: ModelParams, batch: np.ndarray, mode: str = "eval", rng: Rng = None) -> np.ndarray:
    """Predict one count per image; [N, C, H, W] -> [N]."""
    pred, _, _ = _traced_forward(mp, ag.Var(batch), mode, rng)
    out = pred.value
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("model produced non-finite predictions")
    return out


def loss_and_grad(mp: ModelParams, batch: np.ndarray, targets: np.ndarray,
                  rng: Rng, beta: float = 1.0, mode: str = "train"):
    """One training forward/backward; returns (loss, gradient dict)."""
    pred, _, pv = _traced_forward(mp, ag.Var(batch), mode, rng)
    loss = ag.smooth_l1(pred, targets.astype(batch.dtype), beta)
    grads = ag.collect_gradients(loss, pv)
    return loss.value, grads


def mc_predict(mp: ModelParams, image: np.ndarray, t: int, rng: Rng):
    """(mean, std) over t stochastic dropout forwards of one [C, H, W] image."""
    if t < 1:
        raise ValueError("mc_predict needs t >= 1")
    batch = image[None] if image.ndim == 3 else image
    samples = np.array([forward(mp, batch, mode="mc", rng=rng)[0] for _ in range(t)])
    return float(samples.mean()), float(samples.std())


# ---------------------------------------------------------------------------
# model-wide re-parameterization
# ---------------------------------------------------------------------------


def _block_as_parallel(mp: ModelParams, prefix: str, st: StageConfig) -> reparam.ParallelBlockParams:
    branches = []
    for j, k in enumerate(mp.config.branch_kernels(st)):
        spec = ConvSpec(st.channels, st.channels, k, k, groups=st.channels)
        bn = BatchNormParams(
            mean=mp.buffers[f"{prefix}.dw.branch{j}.bn.mean"],
            var=mp.buffers[f"{prefix}.dw.branch{j}.bn.var"],
            gamma=mp.params[f"{prefix}.dw.branch{j}.bn.gamma"],
            beta=mp.params[f"{prefix}.dw.branch{j}.bn.beta"],
        )
        branches.append(reparam.BranchParams(
            kernel=mp.params[f"{prefix}.dw.branch{j}.kernel"], bn=bn, spec=spec))
    return reparam.ParallelBlockParams(branches=branches)


def fuse_model(mp: ModelParams) -> ModelParams:
    """Collapse every parallel depthwise pair into its fused kernel + bias.

    Eval-mode predictions are preserved (to 32-bit accumulation error);
    the result trains exactly like any fused-mode model.
    """
    if mp.config.block_mode != "parallel":
        raise ShapeError("model is already fused")
    cfg = dataclasses.replace(mp.config, block_mode="fused",
                              stages=[dataclasses.replace(s) for s in mp.config.stages])
    params: dict = {}
    buffers: dict = {}
    for name, v in mp.params.items():
        if ".dw.branch" in name:
            continue
        params[name] = v.copy()
    for name, v in mp.buffers.items():
        if ".dw.branch" in name:
            continue
        buffers[name] = v.copy()
    for si, st in enumerate(mp.config.stages):
        for bi in range(st.blocks):
            p = f"stage{si}.block{bi}"
            fused = reparam.reparam_pipeline(_block_as_parallel(mp, p, st))
            params[f"{p}.dw.fused.kernel"] = fused.kernel
            params[f"{p}.dw.fused.bias"] = fused.bias
    # restore canonical parameter ordering (as build_model would emit it)
    ref = build_model(cfg, Rng(0))
    params = {k: params[k] for k in ref.params}
    buffers = {k: buffers[k] for k in ref.buffers}
    return ModelParams(config=cfg, params=params, buffers=buffers)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONFIG_KEY = "config"


def save_model(mp: ModelParams, path) -> None:
    """Self-describing LKC1 checkpoint (config embedded as a text entry)."""
    entries = {_CONFIG_KEY: tensor_io.encode_text(mp.config.to_json())}
    entries.update(mp.params)
    entries.update(mp.buffers)
    tensor_io.save_tensors(entries, path)


def load_model(path) -> ModelParams:
    entries = tensor_io.load_tensors(path)
    if _CONFIG_KEY not in entries:
        raise tensor_io.ContainerError(f"{path}: missing '{_CONFIG_KEY}' entry")
    config = ModelConfig.from_json(tensor_io.decode_text(entries.pop(_CONFIG_KEY)))
    ref = build_model(config, Rng(0))
    dt = config.np_dtype
    params = {}
    buffers = {}
    for name, proto in ref.params.items():
        if name not in entries:
            raise tensor_io.ContainerError(f"{path}: missing parameter {name!r}")
        arr = entries[name].astype(dt, copy=False)
        if arr.shape != proto.shape:
            raise ShapeError(f"{name}: stored shape {arr.shape} != expected {proto.shape}")
        params[name] = arr
    for name, proto in ref.buffers.items():
        if name not in entries:
            raise tensor_io.ContainerError(f"{path}: missing buffer {name!r}")
        buffers[name] = entries[name].astype(dt, copy=False)
    return ModelParams(config=config, params=params, buffers=buffers)
