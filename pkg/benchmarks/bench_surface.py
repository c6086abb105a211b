"""Compare the compiled and pure-Python surface kernels.

    python3 benchmarks/bench_surface.py [--size 128] [--repeat 20]

Prints per-kernel timings (best of ``--repeat``) for each available backend
and checks that both agree on the distances.
"""

import argparse
import timeit

import numpy as np

from biregion import _ext


def _blob(rng, size):
    yy, xx = np.mgrid[:size, :size]
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    r = rng.uniform(0.15, 0.35) * size
    wobble = 1 + 0.1 * np.sin(rng.integers(3, 8) * np.arctan2(yy - cy, xx - cx))
    return ((yy - cy) ** 2 + (xx - cx) ** 2 < (r * wobble) ** 2).astype(np.uint8)


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--classes", type=int, default=4)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    a, b = _blob(rng, args.size), _blob(rng, args.size)
    pred = rng.integers(0, args.classes, (args.size, args.size))
    gt = np.clip(pred + (rng.random(pred.shape) < 0.1), 0, args.classes - 1)

    backends = {"python": _ext.pure}
    if _ext.compiled is not None:
        backends["cython"] = _ext.compiled
    else:
        print("compiled extension not available; timing the fallback only")

    pa = np.ascontiguousarray(np.argwhere(_ext.pure.boundary_mask(a)), dtype=np.int64)
    pb = np.ascontiguousarray(np.argwhere(_ext.pure.boundary_mask(b)), dtype=np.int64)
    print(f"{args.size}x{args.size}, boundary points {len(pa)} / {len(pb)}, best of {args.repeat}")
    print(f"{'kernel':<20} " + " ".join(f"{k:>12}" for k in backends))
    rows = {
        "boundary_mask": lambda m: (lambda: m.boundary_mask(a)),
        "directed_distances": lambda m: (lambda: m.directed_distances(pa, pb)),
        "overlap_counts": lambda m: (lambda: m.overlap_counts(pred, gt, args.classes)),
    }
    for name, make in rows.items():
        ts = [_time(make(m), args.repeat) for m in backends.values()]
        print(f"{name:<20} " + " ".join(f"{1e3 * t:10.3f}ms" for t in ts))

    for name, m in backends.items():
        ref = _ext.pure.directed_distances(pa, pb)
        got = m.directed_distances(pa, pb)
        assert np.allclose(ref, got, atol=1e-9), f"{name} disagrees with the fallback"


if __name__ == "__main__":
    main()
