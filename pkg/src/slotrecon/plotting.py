"""Static report figures: loss curves, mask overlays, metric comparisons."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

log = logging.getLogger(__name__)

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def color_table(n: int) -> np.ndarray:
    """``n x 3`` uint8 colours, slot/label ``i`` -> row ``i``."""
    cmap = plt.get_cmap("tab20")
    return (np.array([cmap(i % 20)[:3] for i in range(n)]) * 255).astype(np.uint8)


def colorize(labels: np.ndarray, n_colors: int | None = None) -> np.ndarray:
    n = n_colors or int(labels.max()) + 1
    return color_table(n)[labels]


def overlay(image: np.ndarray | None, labels: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    colors = colorize(labels).astype(np.float64) / 255
    if image is None:
        return colors
    return (1 - alpha) * image + alpha * colors


def save_overlay_png(path, labels: np.ndarray, image: np.ndarray | None = None) -> None:
    """Write a label map blended over ``image`` (or plain colours) as an 8-bit PNG."""
    rgb = overlay(image, labels)
    Image.fromarray((np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)).save(path, format="PNG")


def savefig(fig, path) -> None:
    log.info("saving %s", path)
    fig.savefig(path)
    plt.close(fig)


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_loss_curve(records: list[dict], path) -> None:
    steps = [r["step"] for r in records if "loss" in r]
    losses = [r["loss"] for r in records if "loss" in r]
    lrs = [r["lr"] for r in records if "loss" in r]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, lw=0.8, color="C0")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("reconstruction MSE", color="C0")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=0.8, color="C1")
    ax2.set_ylabel("learning rate", color="C1")
    ax2.spines["right"].set_visible(True)
    savefig(fig, path)


def plot_mask_grid(path, labels, instances, images=None, titles=("image", "ground truth", "slots"),
                   max_rows: int = 6) -> None:
    """One row per sample: image (if any), ground-truth instances, predicted slot labels."""
    n = min(len(labels), max_rows)
    cols = 3 if images is not None else 2
    fig, axes = plt.subplots(n, cols, figsize=(1.6 * cols, 1.6 * n), squeeze=False)
    for i in range(n):
        panels = []
        if images is not None:
            panels.append(images[i])
        panels += [colorize(instances[i]), overlay(None if images is None else images[i], labels[i])]
        for j, panel in enumerate(panels):
            ax = axes[i, j]
            ax.imshow(np.clip(panel, 0, 255) if panel.dtype == np.uint8 else np.clip(panel, 0, 1),
                      interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j + (0 if images is not None else 1)])
    savefig(fig, path)


def plot_metric_comparison(reports: dict[str, dict[str, float]], path, metrics=None) -> None:
    """Grouped bars: one group per metric, one bar per run name."""
    names = list(reports)
    metrics = metrics or sorted({m for r in reports.values() for m in r})
    x = np.arange(len(metrics))
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(metrics), 3))
    for i, name in enumerate(names):
        vals = [reports[name].get(m, np.nan) for m in metrics]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=7)
    savefig(fig, path)


def write_eval_figures(out_dir, inference_labels, samples, prefix: str = "eval") -> list[Path]:
    """Overlay PNGs for the first samples plus a summary grid; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    images = [s.image for s in samples]
    has_images = all(img is not None for img in images)
    for labels, sample in list(zip(inference_labels, samples))[:8]:
        p = out / f"{prefix}_{sample.sample_id}_overlay.png"
        save_overlay_png(p, labels, sample.image)
        written.append(p)
    grid = out / f"{prefix}_masks.png"
    plot_mask_grid(grid, inference_labels, [s.instances for s in samples],
                   images if has_images else None)
    written.append(grid)
    return written
