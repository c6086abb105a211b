"""Overlap and surface-distance metrics, pseudo-label diagnostics, evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import _ext
from .errors import ConfigError, ShapeError
from .model import predict_proba

MISSING = float("nan")  # sentinel for undefined surface distances
METRIC_NAMES = ("dice", "jaccard", "hd95", "asd")


def _pair(A, B):
    A = np.asarray(A).astype(bool)
    B = np.asarray(B).astype(bool)
    if A.shape != B.shape:
        raise ShapeError(f"mask shapes differ: {A.shape} vs {B.shape}")
    return A, B


def dice(A, B) -> float:
    A, B = _pair(A, B)
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 100.0
    return 200.0 * int((A & B).sum()) / total


def jaccard(A, B) -> float:
    A, B = _pair(A, B)
    union = int((A | B).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((A & B).sum()) / union


def boundary_points(A: np.ndarray) -> np.ndarray:
    if A.ndim != 2:
        raise ShapeError(f"surface metrics are 2D, got shape {A.shape}")
    edge = _ext.boundary_mask(np.ascontiguousarray(A, dtype=np.uint8))
    return np.ascontiguousarray(np.argwhere(edge), dtype=np.int64)


def surface_distances(A, B):
    """Directed boundary-to-boundary distances (A->B, B->A), or None if either is empty."""
    A, B = _pair(A, B)
    pa, pb = boundary_points(A), boundary_points(B)
    if len(pa) == 0 or len(pb) == 0:
        return None
    return _ext.directed_distances(pa, pb), _ext.directed_distances(pb, pa)


def hd95(A, B, pooled: bool = False) -> float:
    """95th-percentile Hausdorff distance in pixels.

    Default: max of the two directed 95th percentiles. ``pooled=True`` takes the
    95th percentile of both directed sets concatenated. NaN if either mask is empty.
    """
    d = surface_distances(A, B)
    if d is None:
        return MISSING
    ab, ba = d
    if pooled:
        return float(np.percentile(np.concatenate([ab, ba]), 95))
    return float(max(np.percentile(ab, 95), np.percentile(ba, 95)))


def asd(A, B) -> float:
    """Average symmetric surface distance in pixels; NaN if either mask is empty."""
    d = surface_distances(A, B)
    if d is None:
        return MISSING
    ab, ba = d
    return float((ab.sum() + ba.sum()) / (len(ab) + len(ba)))


def pseudo_label_error_map(pseudo, gt) -> np.ndarray:
    pseudo = np.asarray(pseudo)
    gt = np.asarray(gt)
    if pseudo.shape != gt.shape:
        raise ShapeError(f"pseudo-label shape {pseudo.shape} does not match ground truth {gt.shape}")
    return (pseudo != gt).astype(np.uint8)


def error_recall(error_map, mask) -> float:
    """|error & mask| / |error|; NaN when there are no errors."""
    e = np.asarray(error_map).astype(bool)
    m = np.asarray(mask).astype(bool)
    n = int(e.sum())
    return float((e & m).sum() / n) if n else MISSING


def pseudo_label_recall(net: torch.nn.Module, samples, q: float = 99.0, seed: int = 0,
                        batch_size: int = 16) -> dict:
    """How many pseudo-label errors fall inside the top-(100 - q)% entropy pixels.

    Masks are thresholded per image. The random baseline draws, per image, a
    mask with the same number of pixels uniformly at random.
    """
    from .uncertainty import entropy_map, percentile_threshold, uncertainty_mask

    samples = [s for s in samples if s.label is not None]
    if not samples:
        return {"q": q, "recall": None, "random_recall": None, "n_errors": 0, "n_pixels": 0}
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    P = predict_proba(net, images, batch_size)
    U = entropy_map(P)
    mask = uncertainty_mask(U, percentile_threshold(U, q, scope="image"), q).values.numpy().astype(bool)
    pseudo = P.argmax(1).numpy()
    gt = np.stack([s.label for s in samples])
    err = pseudo != gt
    rng = np.random.default_rng(seed)
    rand = np.zeros_like(mask)
    for i in range(len(mask)):
        k = int(mask[i].sum())
        flat = rand[i].reshape(-1)
        flat[rng.choice(flat.size, size=k, replace=False)] = True
    n_err = int(err.sum())
    return {
        "q": q,
        "recall": error_recall(err, mask),
        "random_recall": error_recall(err, rand),
        "n_errors": n_err,
        "n_pixels": int(err.size),
        "mask_density": float(mask.mean()),
    }


@dataclass
class MetricsRecord:
    per_class: dict  # class id -> {dice, jaccard, hd95, asd}
    mean: dict  # averaged over foreground classes
    n_samples: int
    # per class, number of samples whose hd95/asd was undefined (excluded from means)
    missing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

        return {
            "per_class": {str(c): clean(v) for c, v in self.per_class.items()},
            "mean": clean(self.mean),
            "n_samples": self.n_samples,
            "missing": {str(c): v for c, v in self.missing.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        def restore(x):
            return {k: (MISSING if v is None else v) for k, v in x.items()}

        return cls(
            per_class={int(c): restore(v) for c, v in d["per_class"].items()},
            mean=restore(d["mean"]),
            n_samples=int(d["n_samples"]),
            missing={int(c): v for c, v in d.get("missing", {}).items()},
        )

    def table(self) -> str:
        head = f"{'class':>6} {'Dice↑':>8} {'Jaccard↑':>9} {'95HD↓':>8} {'ASD↓':>8}"
        rows = [head]
        for c in sorted(self.per_class):
            v = self.per_class[c]
            rows.append(f"{c:>6} {v['dice']:8.2f} {v['jaccard']:9.2f} {v['hd95']:8.2f} {v['asd']:8.2f}")
        m = self.mean
        rows.append(f"{'mean':>6} {m['dice']:8.2f} {m['jaccard']:9.2f} {m['hd95']:8.2f} {m['asd']:8.2f}")
        return "\n".join(rows)


def sample_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    """Per-class metric dict for one predicted label map."""
    pred = np.ascontiguousarray(pred, dtype=np.int64)
    gt = np.ascontiguousarray(gt, dtype=np.int64)
    counts = _ext.overlap_counts(pred, gt, num_classes)
    out = {}
    for c in range(1, num_classes):
        a, b, inter = (int(x) for x in counts[c])
        A, B = pred == c, gt == c
        out[c] = {
            "dice": 200.0 * inter / (a + b) if a + b else 100.0,
            "jaccard": 100.0 * inter / (a + b - inter) if a + b else 100.0,
            "hd95": hd95(A, B),
            "asd": asd(A, B),
        }
    return out


def aggregate(per_sample: Sequence[dict], num_classes: int) -> MetricsRecord:
    per_class, missing = {}, {}
    for c in range(1, num_classes):
        vals = {}
        for name in METRIC_NAMES:
            xs = np.array([s[c][name] for s in per_sample], dtype=np.float64)
            ok = ~np.isnan(xs)
            vals[name] = float(xs[ok].mean()) if ok.any() else MISSING
            if name == "hd95":
                missing[c] = int((~ok).sum())
        per_class[c] = vals
    mean = {}
    for name in METRIC_NAMES:
        xs = np.array([per_class[c][name] for c in per_class])
        ok = ~np.isnan(xs)
        mean[name] = float(xs[ok].mean()) if ok.any() else MISSING
    return MetricsRecord(per_class, mean, len(per_sample), missing)


def evaluate(net: torch.nn.Module, dataset, num_classes: int, batch_size: int = 16) -> MetricsRecord:
    """Argmax predictions of ``net`` scored against every sample's label."""
    if any(s.label is None for s in dataset):
        raise ConfigError("evaluate needs a fully labeled dataset")
    if len(dataset) == 0:
        raise ConfigError("evaluate needs at least one sample")
    images = torch.from_numpy(np.stack([s.image for s in dataset]))
    preds = predict_proba(net, images, batch_size).argmax(1).numpy()
    per_sample = [sample_metrics(p, s.label, num_classes) for p, s in zip(preds, dataset)]
    return aggregate(per_sample, num_classes)


def evaluate_predictions(preds: Sequence[np.ndarray], labels: Sequence[np.ndarray], num_classes: int) -> MetricsRecord:
    return aggregate([sample_metrics(p, g, num_classes) for p, g in zip(preds, labels)], num_classes)
