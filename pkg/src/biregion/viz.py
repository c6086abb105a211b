"""Entropy heatmaps, percentile-mask overlays, pseudo-label maps and error overlays.

Per sample ``<id>`` the output directory receives::

    <id>_entropy_q95.png   heatmap with the uncertain pixels outlined
    <id>_mask_q95.png      the binary mask itself (white = uncertain)
    <id>_pseudo.png        argmax prediction
    <id>_error.png         pixels where the prediction disagrees with the label
    <id>_error_mask.png    binary error map (labeled samples only)

plus ``annotations.json`` with thresholds and mask densities.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError
from .model import predict_proba
from .uncertainty import entropy_map, percentile_threshold, uncertainty_mask

DEFAULT_PERCENTILES = (95.0, 97.0, 99.0)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_binary(path, mask: np.ndarray) -> None:
    _plt().imsave(path, np.asarray(mask, dtype=np.float32), cmap="gray", vmin=0.0, vmax=1.0)


def read_binary(path) -> np.ndarray:
    """Inverse of :func:`save_binary`."""
    img = _plt().imread(path)
    if img.ndim == 3:
        img = img[..., 0]
    return img > 0.5


def _overlay(path, image, heat, mask, title: str) -> None:
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
    axes[0].contour(mask, levels=[0.5], colors="r", linewidths=0.6)
    im = axes[1].imshow(heat, cmap="magma")
    axes[1].contour(mask, levels=[0.5], colors="c", linewidths=0.6)
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.set_axis_off()
    fig.suptitle(title, fontsize=8)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _label_image(path, labels, num_classes: int, title: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(labels, cmap="viridis", vmin=0, vmax=max(num_classes - 1, 1), interpolation="nearest")
    ax.set_axis_off()
    ax.set_title(title, fontsize=8)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _error_overlay(path, image, err) -> None:
    rgb = np.repeat(np.clip(image, 0, 1)[..., None], 3, axis=2)
    rgb[err] = (1.0, 0.0, 0.0)
    _plt().imsave(path, rgb)


def visualize(net: torch.nn.Module, samples: Sequence, out_dir, num_classes: int,
              percentiles: Sequence[float] = DEFAULT_PERCENTILES, batch_size: int = 16) -> dict:
    """Write figures for ``samples`` and return the annotation dict.

    Thresholds are taken per image so each mask holds about (100 - q)% of its pixels.
    """
    net_classes = net.config.num_classes
    if net_classes != num_classes:
        raise ConfigError(f"checkpoint predicts {net_classes} classes but the dataset has {num_classes}")
    for q in percentiles:
        if not 0 < q < 100:
            raise ConfigError(f"percentile must lie in (0, 100), got {q}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes = {"percentiles": list(percentiles), "samples": {}}
    if not samples:
        (out / "annotations.json").write_text(json.dumps(notes, indent=2))
        return notes
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    P = predict_proba(net, images, batch_size)
    U = entropy_map(P)
    pseudo = P.argmax(1).numpy()
    for i, s in enumerate(samples):
        img = s.image[0]
        heat = U[i].numpy()
        entry = {"masks": {}}
        for q in percentiles:
            mu = percentile_threshold(U[i:i + 1], q, scope="image")
            m = uncertainty_mask(U[i:i + 1], mu, q).values[0].numpy().astype(bool)
            tag = f"q{q:g}"
            save_binary(out / f"{s.id}_mask_{tag}.png", m)
            density = float(m.mean())
            _overlay(out / f"{s.id}_entropy_{tag}.png", img, heat, m,
                     f"{s.id}  q={q:g}  mu={float(mu[0]):.4f}  density={100 * density:.2f}%")
            entry["masks"][tag] = {"q": q, "threshold": float(mu[0]), "density": density,
                                   "expected_density": (100.0 - q) / 100.0}
        _label_image(out / f"{s.id}_pseudo.png", pseudo[i], num_classes, f"{s.id} pseudo-labels")
        if s.label is not None:
            err = pseudo[i] != s.label
            save_binary(out / f"{s.id}_error_mask.png", err)
            _error_overlay(out / f"{s.id}_error.png", img, err)
            entry["error_pixels"] = int(err.sum())
        notes["samples"][s.id] = entry
    (out / "annotations.json").write_text(json.dumps(notes, indent=2))
    return notes
