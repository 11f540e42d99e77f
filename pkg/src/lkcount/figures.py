"""Matplotlib rendering of report artifacts (PNG files next to the CSVs)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_erf_figure(report, path) -> None:
    """Heatmap with the nominal RF box and r95 circle overlaid."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 4))
    hm = report.heatmap
    im = ax0.imshow(np.log1p(hm / max(hm.max(), 1e-30) * 1e3), cmap="magma")
    fig.colorbar(im, ax=ax0, fraction=0.046, label="log gradient mass")
    y0, y1, x0, x1 = report.rf_box
    ax0.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0 + 1, y1 - y0 + 1,
                                fill=False, edgecolor="cyan", lw=1.0, label="nominal RF"))
    cy, cx = report.center
    ax0.add_patch(plt.Circle((cx, cy), report.r95, fill=False, edgecolor="lime",
                             lw=1.0, label="r95"))
    ax0.set_title(f"ERF ({report.probe} probe, depth {report.depth})")
    ax0.legend(loc="lower right", fontsize=7)

    from .erf import radial_profile

    prof = radial_profile(report)
    ax1.plot([r for r, _ in prof], [m for _, m in prof])
    ax1.axhline(0.95, color="gray", ls="--", lw=0.8)
    ax1.axvline(report.r95, color="lime", ls="--", lw=0.8,
                label=f"r95 = {report.r95:.1f}px")
    ax1.set_xlabel("radius (px)")
    ax1.set_ylabel("cumulative gradient mass")
    ax1.set_ylim(0, 1.02)
    ax1.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(records, path) -> None:
    fig, ax0 = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in records]
    ax0.plot(epochs, [r["loss"] for r in records], "o-", label="train loss")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("smooth-L1 loss")
    if any(np.isfinite(r["val_mae"]) for r in records):
        ax1 = ax0.twinx()
        ax1.plot(epochs, [r["val_mae"] for r in records], "s-", color="tab:orange",
                 label="val MAE")
        ax1.set_ylabel("val MAE")
        ax1.legend(loc="upper right")
    ax0.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["variant"] for r in rows]
    maes = [r["mae"] for r in rows]
    mses = [r["mse"] for r in rows]
    x = np.arange(len(names))
    ax.bar(x - 0.2, maes, width=0.4, label="MAE")
    ax.bar(x + 0.2, mses, width=0.4, label="MSE")
    ax.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("error (counts)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_scatter(report, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    t = [r[1] for r in report.rows]
    p = [r[2] for r in report.rows]
    lim = max(max(t, default=1), max(p, default=1)) * 1.05
    ax.plot([0, lim], [0, lim], color="gray", lw=0.8)
    ax.scatter(t, p, s=10, alpha=0.5)
    ax.set_xlabel("target count")
    ax.set_ylabel("predicted count")
    ax.set_title(f"MAE {report.mae:.2f} / MSE {report.mse:.2f} (n={report.n})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
