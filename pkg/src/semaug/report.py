"""Image grids and report figures (loss curves, histograms, strategy comparison)."""

from __future__ import annotations

from typing import Optional

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .augment import AugmentedDataset, augment_latent
from .data import DatasetManifest, load_image, save_png
from .evalcls import ComparisonResult


def image_grid(images: list[np.ndarray], cols: int) -> np.ndarray:
    """Tile (C, H, W) images row-major into one (C, rows*H, cols*W) mosaic; pads with -1."""
    if not images:
        raise ValueError("no images to tile")
    c, h, w = images[0].shape
    rows = (len(images) + cols - 1) // cols
    grid = np.full((c, rows * h, cols * w), -1.0, dtype=np.float32)
    for i, img in enumerate(images):
        if img.shape != (c, h, w):
            raise ValueError("all tiles must share one shape")
        r, k = divmod(i, cols)
        grid[:, r * h : (r + 1) * h, k * w : (k + 1) * w] = img
    return grid


def source_vs_augmented_grid(
    manifest: DatasetManifest,
    model,
    stats,
    strength: float,
    out_path: str,
    per_source: int = 4,
    n_sources: int = 8,
    seed: int = 0,
) -> np.ndarray:
    """Each row: one source image followed by per_source augmented decodes of it."""
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(manifest), size=min(n_sources, len(manifest)), replace=False)
    tiles = []
    for i in picks:
        s = manifest.samples[int(i)]
        x = load_image(s, manifest)
        mu, _ = model.encode_np(x[None])
        tiles.append(x)
        for _ in range(per_source):
            z = augment_latent(mu[0], stats.sigma2[s.label], strength, rng)
            tiles.append(model.decode_np(z[None])[0])
    grid = image_grid(tiles, cols=per_source + 1)
    save_png(grid, out_path)
    return grid


def per_class_grid(augmented: AugmentedDataset, out_path: str, per_class: int = 8, seed: int = 0) -> np.ndarray:
    """One row of randomly chosen generated (or original, if none) images per class."""
    rng = np.random.default_rng(seed)
    m = augmented.manifest
    tiles = []
    for c in range(m.class_count):
        pool = augmented.by_class.get(c, [])
        for _ in range(per_class):
            if pool:
                tiles.append(augmented.generated[pool[int(rng.integers(len(pool)))]].image)
            else:
                orig = m.class_indices(c)
                tiles.append(load_image(m.samples[orig[int(rng.integers(len(orig)))]], m))
    grid = image_grid(tiles, cols=per_class)
    save_png(grid, out_path)
    return grid


def plot_loss_curves(log: list[dict], out_path: str) -> None:
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    steps = [e["step"] for e in log]
    axes[0].plot(steps, [e["recon_l1"] for e in log], label="recon L1")
    axes[0].plot(steps, [e["recon_perc"] for e in log], label="recon perceptual")
    axes[0].plot(steps, [e["kld"] for e in log], label="KLD")
    axes[0].set_ylabel("VAE losses")
    axes[0].legend()
    axes[1].plot(steps, [e["d_loss"] for e in log], label="D hinge")
    axes[1].plot(steps, [e["g_adv_loss"] for e in log], label="G adversarial")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("GAN losses")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_histogram(manifest: DatasetManifest, out_path: str, combined: Optional[list[int]] = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(manifest.class_count)
    if combined is not None:
        ax.bar(xs, combined, color="tab:orange", label="after augmentation")
    ax.bar(xs, manifest.histogram, color="tab:blue", label="original")
    ax.set_xlabel("class")
    ax.set_ylabel("samples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_comparison(result: ComparisonResult, out_path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r.strategy for r in result.rows]
    xs = np.arange(len(names))
    width = 0.35
    tp = [r.total_precision_mean for r in result.rows]
    mp = [r.map_mean for r in result.rows]
    ax.bar(xs - width / 2, tp, width, label="Total Precision",
           yerr=[[t - r.total_precision_min for t, r in zip(tp, result.rows)],
                 [r.total_precision_max - t for t, r in zip(tp, result.rows)]], capsize=3)
    ax.bar(xs + width / 2, mp, width, label="mAP",
           yerr=[[m - r.map_min for m, r in zip(mp, result.rows)],
                 [r.map_max - m for m, r in zip(mp, result.rows)]], capsize=3)
    ax.set_xticks(xs, names)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
