"""Report figures written next to the tabular outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ablations(rows, path):
    with plt.rc_context(STYLE):
        rows = [r for r in rows if r.status == "ok"]
        names = [r.variant for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        axes[0].bar(names, [100 * r.accuracy for r in rows], color="tab:blue")
        axes[0].axhline(50, color="k", lw=0.8, ls="--")
        axes[0].set_ylabel("pairs accuracy (%)")
        axes[1].bar(names, [r.alignment_error for r in rows], color="tab:orange")
        axes[1].set_ylabel("alignment error (s)")
        for ax in axes:
            ax.tick_params(axis="x", rotation=45)
        return _save(fig, path)


def plot_training(report, path, title: str = ""):
    with plt.rc_context(STYLE):
        ep = [e["epoch"] for e in report.epochs]
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for key, label in (("loss", "total"), ("l_tl", "triplet"), ("l_al", "attention")):
            ax.plot(ep, [e[key] for e in report.epochs], label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_summary(summary, annotated, path):
    with plt.rc_context(STYLE):
        n = len(summary.importance)
        fig, ax = plt.subplots(figsize=(6, 2))
        for t in annotated:
            ax.axvspan(t, t + 1, color="tab:green", alpha=0.2, lw=0)
        for t in summary.selected:
            ax.axvspan(t, t + 1, ymax=0.08, color="tab:red", lw=0)
        ax.step(np.arange(n + 1), list(summary.importance) + [summary.importance[-1]], where="post")
        ax.axhline(summary.threshold, color="k", lw=0.8, ls="--")
        ax.set_xlim(0, n)
        ax.set_xlabel("second")
        ax.set_ylabel("importance")
        ax.set_title(summary.pair_id)
        return _save(fig, path)


def plot_heatmap_grid(panels, path, ncols: int = 4):
    """``panels``: list of (title, rgb uint8 image)."""
    with plt.rc_context(STYLE):
        nrows = max(1, -(-len(panels) // ncols))
        fig, axes = plt.subplots(nrows, ncols, figsize=(2 * ncols, 2 * nrows), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, (title, img) in zip(axes.ravel(), panels):
            ax.imshow(img)
            ax.set_title(title, fontsize=7)
        return _save(fig, path)


def plot_gaze(image, heat, result, path):
    from .apps.render import overlay

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(overlay(image, heat))
        (hx, hy), (gx, gy) = result.head, result.gaze_point
        ax.annotate("", xy=(gx, gy), xytext=(hx, hy), arrowprops={"arrowstyle": "->", "color": "white", "lw": 1.5})
        ax.plot([hx], [hy], "o", color="white", ms=4)
        ax.plot([gx], [gy], "x", color="white", ms=6)
        ax.axis("off")
        return _save(fig, path)


def plot_coseg(first, third, first_mask, third_mask, path):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(5, 2.6))
        for ax, img, mask, title in ((axes[0], first, first_mask, "first person"),
                                     (axes[1], third, third_mask, "third person")):
            ax.imshow(img)
            ax.contour(mask.astype(float), levels=[0.5], colors="yellow", linewidths=1.2)
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
