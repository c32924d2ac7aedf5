"""Figures written next to the tab-separated outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(losses, path, val=None, title="training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="step")
    if len(losses) >= 20:
        w = max(len(losses) // 50, 5)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1 :], smooth, lw=1.5, label=f"mean over {w}")
    if val:
        vs, vv = zip(*val)
        ax.plot(vs, vv, "o-", ms=3, label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("Huber loss")
    ax.set_title(title)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def slice_grid(volumes, path, n: int = 8, titles=None) -> Path:
    """Central axial, coronal and sagittal slices of up to ``n`` volumes."""
    vols = [np.asarray(v)[0] if np.ndim(v) == 4 else np.asarray(v) for v in volumes[:n]]
    fig, axes = plt.subplots(3, len(vols), figsize=(1.6 * len(vols), 5), squeeze=False)
    for j, v in enumerate(vols):
        d, h, w = v.shape
        for i, sl in enumerate((v[d // 2], v[:, h // 2], v[:, :, w // 2])):
            ax = axes[i, j]
            ax.imshow(sl, cmap="gray", vmin=-1, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
        if titles is not None:
            axes[0, j].set_title(str(titles[j]), fontsize=8)
    return _finish(fig, path)


def metric_panels(report, path) -> Path:
    """PRDC bars, the real/real k sweep and the pairwise MS-SSIM histogram."""
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.3))
    names = ["precision", "recall", "density", "coverage"]
    vals = [float(report.get(n)) for n in names]
    axes[0].bar(names, vals, color="0.4")
    axes[0].axhline(1.0, color="k", lw=0.5)
    axes[0].set_title("real vs generated")
    if report.ksel is not None and report.ksel.scores:
        ks = sorted(report.ksel.scores)
        for n in names:
            axes[1].plot(ks, [getattr(report.ksel.scores[k], n) for k in ks], marker=".", label=n)
        axes[1].axhline(report.ksel.threshold, color="k", ls="--", lw=0.8)
        axes[1].axvline(report.ksel.k, color="r", lw=0.8)
        axes[1].set_xlabel("k")
        axes[1].legend(frameon=False, fontsize=7)
    axes[1].set_title("real/real calibration")
    bins = np.linspace(0, 1, 26)
    if report.real_ms_ssim_values is not None:
        axes[2].hist(report.real_ms_ssim_values, bins=bins, alpha=0.6, label="real")
    if report.ms_ssim_values is not None:
        axes[2].hist(report.ms_ssim_values, bins=bins, alpha=0.6, label="generated")
    axes[2].set_xlabel("pairwise MS-SSIM")
    axes[2].legend(frameon=False, fontsize=7)
    for ax in axes:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return _finish(fig, path)


def mask_scores(scores, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, key in zip(axes, ("dice", "hd95")):
        labels = sorted(k for k in scores[0] if k.startswith(key + "_"))
        ax.boxplot([[s[k] for s in scores] for k in labels])
        ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_title(key.upper())
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return _finish(fig, path)
