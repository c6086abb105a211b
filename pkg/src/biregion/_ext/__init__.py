"""Surface-distance kernels: compiled Cython core with a numpy/scipy fallback.

The compiled module is used when it was built and imports cleanly; setting
``BIREGION_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _surface_py as pure

BACKEND = "python"
if os.environ.get("BIREGION_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _surface as compiled  # type: ignore[attr-defined]
    except ImportError:
        compiled = None
    else:
        BACKEND = "cython"
else:
    compiled = None

_impl = compiled if compiled is not None else pure

boundary_mask = _impl.boundary_mask
directed_distances = _impl.directed_distances
overlap_counts = _impl.overlap_counts

__all__ = ["BACKEND", "boundary_mask", "directed_distances", "overlap_counts", "pure", "compiled"]
