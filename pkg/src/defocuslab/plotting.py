"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# drop the version stamp so identical figures are identical bytes
_SAVE = {"metadata": {"Software": None}, "dpi": 100}


def _save(fig, path):
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_kernel_bank(bank, path, classes=None):
    """Montage of kernels, each on its own colour scale."""
    kernels = bank.numpy()
    classes = list(range(len(kernels))) if classes is None else list(classes)
    cols = min(6, len(classes))
    rows = -(-len(classes) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.8 * cols, 1.9 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, c in zip(axes.flat, classes):
        ax.imshow(kernels[c], cmap="magma", interpolation="nearest")
        ax.set_title(f"c={c}", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(rows, path, keys, title=""):
    """Per-epoch curves for the given history columns."""
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for k in keys:
        vals = [r.get(k) for r in rows]
        if all(v is not None for v in vals):
            ax.plot(epochs, vals, marker=".", label=k)
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_map(dmap, path, c_max=25):
    fig, ax = plt.subplots(figsize=(4, 3.2))
    im = ax.imshow(np.asarray(dmap), cmap="viridis", vmin=0, vmax=c_max)
    ax.axis("off")
    fig.colorbar(im, ax=ax, label="CoC radius (px)")
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(report, path):
    """Per-scene PSNR bars with the mean as a horizontal line."""
    ids = [r["scene_id"] for r in report.rows]
    vals = [r["psnr_db"] for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(ids) + 2), 3.2))
    ax.bar(range(len(ids)), vals, color="#4477aa")
    if report.aggregates.get("psnr_db") is not None:
        ax.axhline(report.aggregates["psnr_db"], color="k", lw=1, ls="--", label="mean")
        ax.legend(fontsize=8)
    ax.set_xticks(range(len(ids)), ids, rotation=90, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    return _save(fig, path)
