"""Random Scaling patches Yield: grid-split, 2D-shuffle, recompose.

The image is cut into an N_h x N_w grid (uniform cells, or randomly scaled
cells), the patches are permuted by a seeded Fisher-Yates shuffle over the
row-major cell index, and each patch is placed (bilinearly resampled when
cell shapes differ) into its destination cell.  The scalar count label is
untouched: supervision is position-free.  Every application returns a
replayable record; uniform-grid applications are exactly invertible.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .rng import Rng


class RsyError(ValueError):
    pass


@dataclass
class RsyConfig:
    n_h: int = 3
    n_w: int = 3
    mode: str = "uniform"  # "uniform" | "random_scale"
    min_cell_fraction: float = 0.5
    probability: float = 0.5

    def __post_init__(self):
        if self.n_h < 1 or self.n_w < 1:
            raise RsyError(f"grid counts must be >= 1, got {self.n_h}x{self.n_w}")
        if not 0.0 < self.min_cell_fraction <= 1.0:
            raise RsyError(f"min_cell_fraction must be in (0, 1], got {self.min_cell_fraction}")
        if self.mode not in ("uniform", "random_scale"):
            raise RsyError(f"unknown mode {self.mode!r}")


@dataclass
class PatchGrid:
    """Exact partition of an image: strictly increasing row/column cuts."""

    rows: list  # n_h + 1 ints, rows[0] == 0, rows[-1] == H
    cols: list  # n_w + 1 ints

    def __post_init__(self):
        for cuts in (self.rows, self.cols):
            if cuts[0] != 0 or any(b - a < 1 for a, b in zip(cuts, cuts[1:])):
                raise RsyError(f"cuts must start at 0 and increase by >= 1: {cuts}")

    @property
    def n_cells(self) -> int:
        return (len(self.rows) - 1) * (len(self.cols) - 1)

    def cell(self, k: int) -> tuple:
        """(y0, y1, x0, x1) of row-major cell k."""
        nw = len(self.cols) - 1
        i, j = divmod(k, nw)
        return self.rows[i], self.rows[i + 1], self.cols[j], self.cols[j + 1]


@dataclass
class RsyRecord:
    """Everything needed to replay or invert one application."""

    src: PatchGrid
    dst: PatchGrid
    perm: list
    seed: int
    mode: str
    applied: bool = True

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise RsyError("perm must be a bijection over the cells")


def _uniform_cuts(extent: int, cells: int) -> list:
    return [(extent * i) // cells for i in range(cells + 1)]


def _random_extents(extent: int, cells: int, frac: float, rng: Rng) -> list:
    """Cell extents from normalised uniform weights in [frac, 2-frac].

    Largest-remainder rounding keeps the total exact; a final pass guarantees
    every cell is at least one pixel (the weight range only bounds extents
    proportionally, so tiny images can round a cell to zero).
    """
    w = rng.uniform_array(cells) * (2.0 - 2.0 * frac) + frac
    ideal = w / w.sum() * extent
    base = np.floor(ideal).astype(int)
    rem = ideal - base
    short = extent - int(base.sum())
    for idx in np.argsort(-rem, kind="stable")[:short]:
        base[idx] += 1
    while np.any(base < 1):
        base[int(np.argmin(base))] += 1
        base[int(np.argmax(base))] -= 1
    return base.tolist()


def sample_grid(h: int, w: int, config: RsyConfig, rng: Rng) -> PatchGrid:
    """Draw a patch grid: uniform floor cuts, or randomly scaled extents."""
    if h < config.n_h or w < config.n_w:
        raise RsyError(f"image {h}x{w} smaller than grid {config.n_h}x{config.n_w}")
    if config.mode == "uniform":
        return PatchGrid(_uniform_cuts(h, config.n_h), _uniform_cuts(w, config.n_w))
    re = _random_extents(h, config.n_h, config.min_cell_fraction, rng)
    ce = _random_extents(w, config.n_w, config.min_cell_fraction, rng)
    return PatchGrid(list(np.concatenate([[0], np.cumsum(re)])),
                     list(np.concatenate([[0], np.cumsum(ce)])))


def split(image: np.ndarray, grid: PatchGrid) -> list:
    """Row-major list of [C, h_k, w_k] patches; exact partition of the image."""
    patches = []
    for k in range(grid.n_cells):
        y0, y1, x0, x1 = grid.cell(k)
        patches.append(image[:, y0:y1, x0:x1])
    return patches


def shuffle_2d(n_cells: int, rng: Rng) -> list:
    """Fisher-Yates permutation of the row-major cell indices."""
    perm = list(range(n_cells))
    rng.shuffle(perm)
    return perm


def _resample_bilinear(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel centres at half-integers (align_corners=False)."""
    c, h, w = patch.shape
    if (h, w) == (out_h, out_w):
        return patch.copy()
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(patch.dtype)
    fx = (sx - x0).astype(patch.dtype)
    top = patch[:, y0][:, :, x0] * (1 - fx) + patch[:, y0][:, :, x1] * fx
    bot = patch[:, y1][:, :, x0] * (1 - fx) + patch[:, y1][:, :, x1] * fx
    return top * (1 - fy[None, :, None]) + bot * fy[None, :, None]


def recompose(patches: list, perm: list, dst: PatchGrid) -> np.ndarray:
    """Place source patch k into destination cell perm[k]."""
    if len(patches) != dst.n_cells or len(perm) != dst.n_cells:
        raise RsyError(f"{len(patches)} patches / perm {len(perm)} vs {dst.n_cells} cells")
    c = patches[0].shape[0]
    out = np.empty((c, dst.rows[-1], dst.cols[-1]), dtype=patches[0].dtype)
    for k, patch in enumerate(patches):
        y0, y1, x0, x1 = dst.cell(perm[k])
        out[:, y0:y1, x0:x1] = _resample_bilinear(patch, y1 - y0, x1 - x0)
    return out


def rsy_apply(sample, config: RsyConfig, rng: Rng):
    """Augment one sample; returns (new sample, record).

    Draw order: application gate, source grid, destination grid, permutation.
    The count label carries over unchanged; object centers are dropped (they
    are meaningless after shuffling).
    """
    seed = rng.state
    image = sample.image
    _, h, w = image.shape
    if rng.uniform() >= config.probability:
        grid = sample_grid(h, w, dataclasses.replace(config, mode="uniform"), rng)
        record = RsyRecord(grid, grid, list(range(grid.n_cells)), seed, config.mode, applied=False)
        return sample, record
    if config.mode == "uniform":
        src = sample_grid(h, w, config, rng)
        dst = src
    else:
        src = sample_grid(h, w, config, rng)
        dst = sample_grid(h, w, config, rng)
    perm = shuffle_2d(src.n_cells, rng)
    out = recompose(split(image, src), perm, dst)
    record = RsyRecord(src, dst, perm, seed, config.mode)
    return dataclasses.replace(sample, image=out, centers=None), record


def invert(image: np.ndarray, record: RsyRecord) -> np.ndarray:
    """Undo a uniform-mode application bit-exactly via the inverse permutation."""
    if record.mode != "uniform":
        raise RsyError("not invertible: random_scale resampling loses information")
    if not record.applied:
        return image.copy()
    inv = [0] * len(record.perm)
    for k, p in enumerate(record.perm):
        inv[p] = k
    return recompose(split(image, record.dst), inv, record.src)


# ---------------------------------------------------------------------------
# record text format (replay files for the CLI)
# ---------------------------------------------------------------------------


def record_to_text(record: RsyRecord) -> str:
    def ints(v):
        return ",".join(str(int(x)) for x in v)

    return "".join(
        f"{k}={v}\n"
        for k, v in [
            ("seed", record.seed),
            ("mode", record.mode),
            ("applied", int(record.applied)),
            ("src_rows", ints(record.src.rows)),
            ("src_cols", ints(record.src.cols)),
            ("dst_rows", ints(record.dst.rows)),
            ("dst_cols", ints(record.dst.cols)),
            ("perm", ints(record.perm)),
        ]
    )


def record_from_text(text: str) -> RsyRecord:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if line:
            k, _, v = line.partition("=")
            kv[k] = v
    try:
        ints = lambda s: [int(x) for x in s.split(",")]
        return RsyRecord(
            src=PatchGrid(ints(kv["src_rows"]), ints(kv["src_cols"])),
            dst=PatchGrid(ints(kv["dst_rows"]), ints(kv["dst_cols"])),
            perm=ints(kv["perm"]),
            seed=int(kv["seed"]),
            mode=kv["mode"],
            applied=bool(int(kv["applied"])),
        )
    except KeyError as e:
        raise RsyError(f"record text missing field {e}") from e
