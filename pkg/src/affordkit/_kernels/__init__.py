"""Hot numeric kernels with a compiled fast path.

The Cython extension ``affordkit._kernels._native`` is optional: when it is
missing (source checkout, unsupported platform) the numpy implementations in
``_numpy`` are used instead. Set ``AFFORDKIT_KERNELS=numpy`` to force the
fallback, e.g. for benchmarking.
"""

from __future__ import annotations

import os

from . import _numpy

_forced = os.environ.get("AFFORDKIT_KERNELS", "").strip().lower()
if _forced not in ("", "native", "numpy"):
    raise RuntimeError(f"AFFORDKIT_KERNELS must be 'native' or 'numpy', got {_forced!r}")

_impl = None
if _forced != "numpy":
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _forced == "native":
            raise
        _impl = None
if _impl is None:
    _impl = _numpy

BACKEND: str = "native" if _impl is not _numpy else "numpy"

laplacian_variance = _impl.laplacian_variance
cosine_best_cell = _impl.cosine_best_cell
point_min_distances = _impl.point_min_distances


def backend() -> str:
    """Name of the kernel implementation selected at import time."""
    return BACKEND


def available_backends() -> list[str]:
    out = ["numpy"]
    try:
        from . import _native  # noqa: F401

        out.insert(0, "native")
    except ImportError:
        pass
    return out
