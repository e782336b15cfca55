"""Rasterizer compute backends.

The numba backend is the default; set SQSPLAT_BACKEND=numpy to force the
pure-numpy reference path (also used automatically when numba is missing).
"""

from __future__ import annotations

import os

from .binning import ALPHA_MAX, ALPHA_SKIP, LOWPASS, RADIUS_SIGMAS, T_MIN, TILE, bin_splats

_CHOICE = os.environ.get("SQSPLAT_BACKEND", "numba").lower()

if _CHOICE == "numpy":
    from . import cpu_numpy as backend
elif _CHOICE == "numba":
    try:
        from . import cpu_numba as backend
    except ImportError:  # pragma: no cover
        from . import cpu_numpy as backend
else:
    raise ValueError(f"SQSPLAT_BACKEND must be 'numba' or 'numpy', got {_CHOICE!r}")

BACKEND_NAME = backend.__name__.rsplit("_", 1)[-1]

forward = backend.forward
backward = backend.backward

__all__ = [
    "ALPHA_MAX", "ALPHA_SKIP", "LOWPASS", "RADIUS_SIGMAS", "T_MIN", "TILE",
    "BACKEND_NAME", "bin_splats", "forward", "backward",
]
