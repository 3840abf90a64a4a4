"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def similarity_histogram(hist: dict, path, title: str = "content code similarity") -> Path:
    """Positive/negative pair cosine similarity distributions from ``EmbeddingAnalysis.histogram``."""
    edges = np.asarray(hist["edges"])
    centers = 0.5 * (edges[1:] + edges[:-1])
    width = edges[1] - edges[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for key, color in (("negative", "tab:gray"), ("positive", "tab:red")):
            counts = np.asarray(hist[key], dtype=float)
            dens = counts / max(counts.sum() * width, 1e-12)
            ax.bar(centers, dens, width=width, alpha=0.6, color=color, label=f"{key} pairs")
        ax.set_xlim(-1, 1)
        ax.set_xlabel("cosine similarity")
        ax.set_ylabel("density")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def metric_summary(aggregates: list[dict], path) -> Path:
    """One panel per metric, bars are mean with std error bars."""
    by_metric = defaultdict(list)
    for a in aggregates:
        if np.isfinite(a["mean"]):
            by_metric[a["metric"]].append(a)
    n = max(len(by_metric), 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
        for ax, (metric, rows) in zip(axes[0], sorted(by_metric.items())):
            names = [r["structure"] or r["target"] for r in rows]
            ax.bar(range(len(rows)), [r["mean"] for r in rows],
                   yerr=[r["std"] for r in rows], color="tab:blue", capsize=2)
            ax.set_xticks(range(len(rows)), names, rotation=45, ha="right")
            ax.set_title(metric)
        if not by_metric:
            axes[0, 0].text(0.5, 0.5, "no finite values", ha="center", va="center")
        return _save(fig, path)


def modality_panel(images: list[np.ndarray], names: list[str], path, source: str | None = None) -> Path:
    """Middle slice of each modality side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(2.0 * len(images), 2.2), squeeze=False)
        for ax, img, name in zip(axes[0], images, names):
            img = np.asarray(img)
            if img.ndim == 3:
                img = img[len(img) // 2]
            ax.imshow(img, cmap="gray")
            ax.set_title(f"{name} (input)" if name == source else name)
            ax.axis("off")
        return _save(fig, path)


def label_panel(image: np.ndarray, labels: np.ndarray, path) -> Path:
    image, labels = np.asarray(image), np.asarray(labels)
    if image.ndim == 3:
        image, labels = image[len(image) // 2], labels[len(labels) // 2]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(4.4, 2.2))
        axes[0].imshow(image, cmap="gray")
        axes[1].imshow(labels, cmap="tab10", interpolation="nearest", vmin=0, vmax=9)
        for ax, t in zip(axes, ("input", "labels")):
            ax.set_title(t)
            ax.axis("off")
        return _save(fig, path)


def training_curves(log_path, path, keys=("total", "self_recon", "cycle", "loss")) -> Path:
    """Loss curves from a ``train_log.jsonl``."""
    rows = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
    rows = [r for r in rows if "step" in r and "event" not in r]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        for key in keys:
            pts = [(r["step"], r[key]) for r in rows if key in r]
            if pts:
                s, v = zip(*pts)
                ax.plot(s, v, lw=1, label=key)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)
