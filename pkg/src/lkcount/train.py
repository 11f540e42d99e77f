"""Training, evaluation, baselines, and the ablation battery.

The loop regresses the scalar count with smooth-L1 loss and Adam.  All
randomness (shuffling, augmentation, dropout) derives from the config seed
via per-(epoch, index) child streams, so runs are reproducible and
independent of iteration details.
"""

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import rsy as rsy_mod
from .autograd import GradientError
from .data import DatasetConfig, Sample, gen_dataset
from .model import ModelConfig, ModelParams, build_model, fuse_model, save_model
from .ops import AdamState, adam_step
from .rng import Rng, derive_seed

# rng stream tags (seed derivation namespaces)
_TAG_SHUFFLE, _TAG_AUG, _TAG_DROPOUT, _TAG_INIT = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint was retained."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    crop: int = 96
    flip_prob: float = 0.5
    rsy: rsy_mod.RsyConfig = field(default_factory=rsy_mod.RsyConfig)
    rsy_enabled: bool = False
    lr: float = 1e-3
    epochs: int = 6
    seed: int = 0
    loss_beta: float = 1.0
    norm_mean: float = 0.45
    norm_std: float = 0.225
    pad_multiple: int = 8
    ckpt_path: str = None
    log_path: str = None

    def __post_init__(self):
        if isinstance(self.rsy, dict):
            self.rsy = rsy_mod.RsyConfig(**self.rsy)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def desk_train_config() -> TrainConfig:
    return TrainConfig()


def paper_train_config() -> TrainConfig:
    """Fidelity preset mirroring the reference recipe (384 crop, batch 24, lr 1e-5)."""
    return TrainConfig(batch_size=24, crop=384, lr=1e-5, epochs=100,
                       rsy=rsy_mod.RsyConfig(n_h=4, n_w=4), rsy_enabled=True,
                       pad_multiple=16)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def count_in_window(centers, y0: int, x0: int, size: int) -> int:
    """Centers falling in [y0, y0+size) x [x0, x0+size)."""
    if centers is None or len(centers) == 0:
        return 0
    y, x = centers[:, 0], centers[:, 1]
    return int(np.sum((y >= y0) & (y < y0 + size) & (x >= x0) & (x < x0 + size)))


def preprocess(sample: Sample, cfg: TrainConfig, rng: Rng, phase: str = "train"):
    """One sample -> (normalised image, label).

    train: random crop (label recomputed from the centers inside the window),
    horizontal flip, optional RSY, then per-channel normalisation.
    eval: pad height/width up to the stride multiple (fill = dataset mean, so
    padding is zero after normalisation), label unchanged.
    """
    img = sample.image
    c, h, w = img.shape
    if phase == "train":
        if cfg.crop > h or cfg.crop > w:
            raise ValueError(f"crop {cfg.crop} larger than image {h}x{w}")
        y0 = rng.below(h - cfg.crop + 1)
        x0 = rng.below(w - cfg.crop + 1)
        img = img[:, y0 : y0 + cfg.crop, x0 : x0 + cfg.crop]
        label = count_in_window(sample.centers, y0, x0, cfg.crop)
        centers = None
        if sample.centers is not None and len(sample.centers):
            keep = ((sample.centers[:, 0] >= y0) & (sample.centers[:, 0] < y0 + cfg.crop)
                    & (sample.centers[:, 1] >= x0) & (sample.centers[:, 1] < x0 + cfg.crop))
            centers = sample.centers[keep] - np.array([y0, x0], dtype=np.float64)
        if rng.uniform() < cfg.flip_prob:
            img = img[:, :, ::-1].copy()
            if centers is not None:
                centers = centers.copy()
                centers[:, 1] = (cfg.crop - 1) - centers[:, 1]
        if cfg.rsy_enabled:
            s = Sample(image=img, count=label, centers=centers)
            s, _ = rsy_mod.rsy_apply(s, cfg.rsy, rng)
            img = s.image
        img = (img - cfg.norm_mean) / cfg.norm_std
        return img.astype(np.float32), label
    if phase == "eval":
        m = cfg.pad_multiple
        ph = (-h) % m
        pw = (-w) % m
        if ph or pw:
            img = np.pad(img, ((0, 0), (0, ph), (0, pw)), constant_values=cfg.norm_mean)
        img = (img - cfg.norm_mean) / cfg.norm_std
        return img.astype(np.float32), sample.count
    raise ValueError(f"phase must be train|eval, got {phase!r}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """MAE and root-mean-square error with the per-sample table behind them."""

    mae: float
    mse: float
    n: int
    rows: list  # (index, target, prediction, abs_error)

    def __post_init__(self):
        if self.mae > self.mse + 1e-9:
            raise ValueError(f"MAE {self.mae} > MSE {self.mse} (impossible)")

    @classmethod
    def from_predictions(cls, preds, targets) -> "EvalReport":
        preds = np.asarray(preds, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        err = preds - targets
        rows = [
            (i, float(targets[i]), float(preds[i]), float(abs(err[i])))
            for i in range(len(preds))
        ]
        return cls(
            mae=float(np.mean(np.abs(err))),
            mse=float(np.sqrt(np.mean(err**2))),
            n=len(preds),
            rows=rows,
        )

    def to_csv(self) -> str:
        lines = ["index,target,prediction,abs_error"]
        lines += [f"{i},{t:.6f},{p:.6f},{e:.6f}" for i, t, p, e in self.rows]
        return "\n".join(lines) + "\n"


def evaluate(mp: ModelParams, samples: list, cfg: TrainConfig) -> EvalReport:
    """Deterministic eval-mode predictions, one sample at a time.

    Per-sample forwards make the report independent of any batch partitioning
    by construction.
    """
    preds = []
    targets = []
    for s in samples:
        img, label = preprocess(s, cfg, rng=None, phase="eval")
        preds.append(float(model_mod.forward(mp, img[None], mode="eval")[0]))
        targets.append(label)
    return EvalReport.from_predictions(preds, targets)


def baseline_mean(train_samples: list, eval_samples: list) -> EvalReport:
    """Sanity floor: predict the training-mean count everywhere."""
    mean = float(np.mean([s.count for s in train_samples])) if train_samples else 0.0
    preds = [mean] * len(eval_samples)
    targets = [s.count for s in eval_samples]
    return EvalReport.from_predictions(preds, targets)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _format_record(rec: dict) -> str:
    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    return " ".join(f"{k}={fmt(v)}" for k, v in rec.items())


def parse_log_line(line: str) -> dict:
    out = {}
    for part in line.split():
        k, _, v = part.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset: dict,
          init_params: ModelParams = None, quiet: bool = True):
    """Fit the counter; returns (best-val-MAE params, per-epoch log records).

    ``dataset`` maps split name -> list of Samples (as from gen_dataset).
    When ``init_params`` is given (e.g. a fused checkpoint for fine-tuning)
    it is trained in place of a fresh initialisation.
    """
    seed = train_cfg.seed
    mp = init_params.clone() if init_params is not None else build_model(
        model_cfg, Rng(derive_seed(seed, _TAG_INIT)))
    train_split = dataset["train"]
    val_split = dataset.get("val", [])
    state = AdamState(lr=train_cfg.lr)
    records = []
    best = mp.clone()
    best_mae = np.inf
    log_lines = []
    indices = list(range(len(train_split)))
    for epoch in range(train_cfg.epochs):
        t0 = time.monotonic()
        Rng(derive_seed(seed, _TAG_SHUFFLE, epoch)).shuffle(indices)
        losses = []
        for step, start in enumerate(range(0, len(indices), train_cfg.batch_size)):
            chunk = indices[start : start + train_cfg.batch_size]
            imgs, labels = [], []
            for idx in chunk:
                rng = Rng(derive_seed(seed, _TAG_AUG, epoch, idx))
                img, label = preprocess(train_split[idx], train_cfg, rng, phase="train")
                imgs.append(img)
                labels.append(label)
            batch = np.stack(imgs)
            targets = np.array(labels, dtype=np.float32)
            drop_rng = Rng(derive_seed(seed, _TAG_DROPOUT, epoch, step))
            try:
                loss, grads = model_mod.loss_and_grad(
                    mp, batch, targets, drop_rng, beta=train_cfg.loss_beta)
                if not np.isfinite(loss):
                    raise FloatingPointError("non-finite loss")
            except (FloatingPointError, GradientError) as e:
                if train_cfg.ckpt_path:
                    save_model(best if np.isfinite(best_mae) else mp, train_cfg.ckpt_path)
                raise TrainingDiverged(
                    f"diverged at epoch {epoch} step {step} ({e}); "
                    "last good checkpoint kept") from e
            adam_step(mp.params, grads, state)
            losses.append(loss)
        val_rep = evaluate(mp, val_split, train_cfg) if val_split else None
        rec = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "val_mae": val_rep.mae if val_rep else float("nan"),
            "val_mse": val_rep.mse if val_rep else float("nan"),
            "time_s": time.monotonic() - t0,
        }
        records.append(rec)
        log_lines.append(_format_record(rec))
        if not quiet:
            print(log_lines[-1], flush=True)
        if val_rep is None or val_rep.mae < best_mae:
            best_mae = val_rep.mae if val_rep else 0.0
            best = mp.clone()
            if train_cfg.ckpt_path:
                save_model(best, train_cfg.ckpt_path)
    if train_cfg.ckpt_path:
        save_model(best, train_cfg.ckpt_path)
    if train_cfg.log_path:
        Path(train_cfg.log_path).write_text("\n".join(log_lines) + "\n")
    return best, records


def overfit_fixed_batch(model_cfg: ModelConfig, samples: list, steps: int = 500,
                        lr: float = 1e-3, seed: int = 0):
    """Drive a fixed batch for ``steps`` updates; returns the loss trace.

    The capacity/gradient smoke check: a working model+optimiser pair must
    collapse the loss on a handful of memorisable samples.
    """
    cfg = TrainConfig(lr=lr, seed=seed)
    imgs, labels = [], []
    for s in samples:
        img, label = preprocess(s, cfg, rng=None, phase="eval")
        imgs.append(img)
        labels.append(label)
    batch = np.stack(imgs)
    targets = np.array(labels, np.float32)
    mp = build_model(model_cfg, Rng(derive_seed(seed, _TAG_INIT)))
    state = AdamState(lr=lr)
    trace = []
    for step in range(steps):
        rng = Rng(derive_seed(seed, _TAG_DROPOUT, 0, step))
        loss, grads = model_mod.loss_and_grad(mp, batch, targets, rng, beta=cfg.loss_beta)
        trace.append(loss)
        adam_step(mp.params, grads, state)
    return trace


# ---------------------------------------------------------------------------
# pretext pretraining + ablation battery
# ---------------------------------------------------------------------------


def pretext_pretrain(model_cfg: ModelConfig, data_cfg: DatasetConfig,
                     train_cfg: TrainConfig) -> ModelParams:
    """Stand-in for large-corpus pretraining of the parallel backbone.

    Trains on a shifted synthetic distribution (different seed and object
    statistics), producing the checkpoint the re-parameterization pipeline
    collapses before fine-tuning.
    """
    pre_data_cfg = dataclasses.replace(
        data_cfg,
        seed=derive_seed(data_cfg.seed, 97),
        radius_min=max(1.0, data_cfg.radius_min + 1.0),
        radius_max=data_cfg.radius_max + 1.0,
        split_sizes=(min(data_cfg.split_sizes[0], 800), 100, 0),
    )
    pre_train_cfg = dataclasses.replace(
        train_cfg, seed=derive_seed(train_cfg.seed, 98),
        rsy_enabled=False, ckpt_path=None, log_path=None)
    best, _ = train(pre_train_cfg, model_cfg, gen_dataset(pre_data_cfg))
    return best


ABLATION_VARIANTS = ("plain_small", "large_kernel", "lk_parallel", "lk_reparam", "lk_reparam_rsy")


def _variant_model_cfg(base: ModelConfig, variant: str) -> ModelConfig:
    stages = [dataclasses.replace(s) for s in base.stages]
    if variant == "plain_small":
        for s in stages:
            s.k_large, s.k_small = 3, 1
        return dataclasses.replace(base, stages=stages, dw_branches=1)
    if variant == "large_kernel":
        return dataclasses.replace(base, stages=stages, dw_branches=1)
    return dataclasses.replace(base, stages=stages, dw_branches=2)


def ablation_run(dataset: dict, data_cfg: DatasetConfig, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, quiet: bool = True) -> list:
    """Train the five framework variants and report MAE/MSE on the test split.

    Variants: plain small-kernel, large kernel, + parallel small branch,
    + re-parameterized pretraining, + RSY.  Returns CSV-ready row dicts; no
    ordering among variants is asserted anywhere.
    """
    test_split = dataset.get("test") or dataset["val"]
    rows = []
    base_rep = baseline_mean(dataset["train"], test_split)
    rows.append({"variant": "baseline_mean", "mae": base_rep.mae, "mse": base_rep.mse,
                 "params": 0, "seconds": 0.0})
    for variant in ABLATION_VARIANTS:
        t0 = time.monotonic()
        vcfg = _variant_model_cfg(model_cfg, variant)
        vtrain = dataclasses.replace(
            train_cfg, rsy_enabled=(variant == "lk_reparam_rsy"),
            ckpt_path=None, log_path=None)
        init = None
        if variant in ("lk_reparam", "lk_reparam_rsy"):
            pretrained = pretext_pretrain(vcfg, data_cfg, vtrain)
            init = fuse_model(pretrained)
        best, _ = train(vtrain, vcfg if init is None else init.config, dataset,
                        init_params=init, quiet=quiet)
        rep = evaluate(best, test_split, vtrain)
        rows.append({"variant": variant, "mae": rep.mae, "mse": rep.mse,
                     "params": best.param_count(),
                     "seconds": time.monotonic() - t0})
        if not quiet:
            print(f"ablation {variant}: mae={rep.mae:.3f} mse={rep.mse:.3f}", flush=True)
    return rows


def ablation_csv(rows: list) -> str:
    lines = ["variant,mae,mse,params,seconds"]
    lines += [
        f"{r['variant']},{r['mae']:.6f},{r['mse']:.6f},{r['params']},{r['seconds']:.2f}"
        for r in rows
    ]
    return "\n".join(lines) + "\n"
