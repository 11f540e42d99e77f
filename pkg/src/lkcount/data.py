"""Synthetic counting data: blob images with exact scalar labels.

Each sample is an image containing k objects (anti-aliased discs or Gaussian
splats) at recorded centre positions, plus clamped Gaussian background noise;
the label is the exact object count.  Generation is deterministic: every
sample draws from its own stream derived from (seed, split, index), so splits
are reproducible regardless of iteration order.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io
from .rng import Rng, derive_seed


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    count: int
    centers: np.ndarray = None  # [k, 2] float64 (y, x), None once invalidated

    def __post_init__(self):
        if self.centers is not None and len(self.centers) != self.count:
            raise ValueError(f"count {self.count} != {len(self.centers)} centers")


@dataclass
class DatasetConfig:
    image_size: int = 96
    channels: int = 1
    count_min: int = 0
    count_max: int = 30
    radius_min: float = 2.0
    radius_max: float = 6.0
    profile: str = "disc"  # "disc" | "gaussian"
    noise_sigma: float = 0.02
    split_sizes: tuple = (2000, 200, 200)
    seed: int = 0

    def __post_init__(self):
        if self.count_min > self.count_max:
            raise ValueError("count_min > count_max")
        if self.radius_min < 1:
            raise ValueError("object radius must be >= 1")
        if self.profile not in ("disc", "gaussian"):
            raise ValueError(f"unknown profile {self.profile!r}")
        self.split_sizes = tuple(self.split_sizes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetConfig":
        return cls(**json.loads(text))


SPLITS = ("train", "val", "test")


def _render_sample(config: DatasetConfig, rng: Rng) -> Sample:
    size = config.image_size
    img = np.zeros((config.channels, size, size), dtype=np.float64)
    k = rng.randint(config.count_min, config.count_max)
    centers = np.empty((k, 2), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(k):
        r = config.radius_min + rng.uniform() * (config.radius_max - config.radius_min)
        # keep the centre inside the frame with a margin of one radius
        cy = r + rng.uniform() * (size - 1 - 2 * r)
        cx = r + rng.uniform() * (size - 1 - 2 * r)
        amp = 0.5 + 0.5 * rng.uniform()
        centers[i] = (cy, cx)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        if config.profile == "disc":
            blob = amp * np.clip(r + 0.5 - d, 0.0, 1.0)  # 1px anti-aliased rim
        else:
            blob = amp * np.exp(-0.5 * (d / (r / 2.0)) ** 2)
        img += blob[None]
    if config.noise_sigma > 0:
        noise = rng.normal_array(img.size).reshape(img.shape) * config.noise_sigma
        img += noise
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(image=img, count=k, centers=centers)


def gen_split(config: DatasetConfig, split: str) -> list:
    si = SPLITS.index(split)
    n = config.split_sizes[si]
    return [
        _render_sample(config, Rng(derive_seed(config.seed, si, i)))
        for i in range(n)
    ]


def gen_dataset(config: DatasetConfig) -> dict:
    """All three splits as {name: [Sample, ...]}."""
    return {s: gen_split(config, s) for s in SPLITS}


# ---------------------------------------------------------------------------
# on-disk layout: one LKC1 file per split + a JSON manifest
# ---------------------------------------------------------------------------


def save_dataset(dataset: dict, config: DatasetConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": json.loads(config.to_json()), "splits": {}}
    for split, samples in dataset.items():
        images = np.stack([s.image for s in samples]) if samples else np.zeros(
            (0, config.channels, config.image_size, config.image_size), np.float32)
        counts = np.array([s.count for s in samples], dtype=np.float32)
        centers = [s.centers for s in samples]
        flat = (np.concatenate(centers) if any(len(c) for c in centers)
                else np.zeros((0, 2))) if samples else np.zeros((0, 2))
        offsets = np.cumsum([0] + [len(c) for c in centers]).astype(np.float64)
        fname = f"{split}.lkc1"
        tensor_io.save_tensors(
            {
                "images": images,
                "counts": counts,
                "centers": flat.reshape(-1, 2).astype(np.float64),
                "center_offsets": offsets,
            },
            out / fname,
        )
        manifest["splits"][split] = {"file": fname, "n": len(samples)}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_split(data_dir, split: str) -> list:
    root = Path(data_dir)
    manifest = json.loads((root / "dataset.json").read_text())
    entry = manifest["splits"][split]
    t = tensor_io.load_tensors(root / entry["file"])
    offsets = t["center_offsets"].astype(int)
    samples = []
    for i in range(entry["n"]):
        c = t["centers"][offsets[i] : offsets[i + 1]]
        samples.append(Sample(image=t["images"][i], count=int(t["counts"][i]), centers=c))
    return samples


def load_config(data_dir) -> DatasetConfig:
    manifest = json.loads((Path(data_dir) / "dataset.json").read_text())
    return DatasetConfig(**manifest["config"])
