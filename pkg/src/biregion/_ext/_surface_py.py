"""Pure-Python (numpy/scipy) versions of the compiled surface kernels."""

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary_mask(fg: np.ndarray) -> np.ndarray:
    fg = fg.astype(bool)
    # border_value=0 makes pixels on the image edge count as boundary
    inner = ndimage.binary_erosion(fg, structure=_CROSS, border_value=0)
    return (fg & ~inner).astype(np.uint8)


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(b) == 0:
        return np.full(len(a), np.inf)
    if len(a) == 0:
        return np.zeros(0)
    lo = np.minimum(a.min(0), b.min(0))
    hi = np.maximum(a.max(0), b.max(0))
    grid = np.ones(tuple(hi - lo + 1), dtype=bool)
    grid[tuple((b - lo).T)] = False
    # exact Euclidean transform: distance of every cell to the nearest b point
    dist = ndimage.distance_transform_edt(grid)
    return dist[tuple((a - lo).T)].astype(np.float64)


def overlap_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((num_classes, 3), dtype=np.int64)
    p = pred.ravel()
    g = gt.ravel()
    out[:, 0] = np.bincount(p[(p >= 0) & (p < num_classes)], minlength=num_classes)[:num_classes]
    out[:, 1] = np.bincount(g[(g >= 0) & (g < num_classes)], minlength=num_classes)[:num_classes]
    same = p[(p == g) & (p >= 0) & (p < num_classes)]
    out[:, 2] = np.bincount(same, minlength=num_classes)[:num_classes]
    return out
