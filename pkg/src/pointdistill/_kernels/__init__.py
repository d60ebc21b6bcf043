"""KNN kernel backend selection.

POINTDISTILL_BACKEND picks the implementation at import time:
  auto  (default) numba when importable, else pure numpy
  numba           require numba, raise if unavailable
  numpy           force the pure numpy fallback
Both backends return identical arrays; see benchmarks/backend_bench.py for
the speed comparison.
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import numpy_backend

_requested = os.environ.get("POINTDISTILL_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"POINTDISTILL_BACKEND must be auto, numba, or numpy; got {_requested!r}"
    )

numba_backend = None
if _requested in ("auto", "numba"):
    try:
        # importlib, not `from . import`: the None placeholder above already
        # shadows the submodule name on this package.
        numba_backend = importlib.import_module(f"{__name__}.numba_backend")
    except ImportError:
        if _requested == "numba":
            raise

ACTIVE_BACKEND = "numba" if numba_backend is not None else "numpy"
_active = numba_backend if numba_backend is not None else numpy_backend


def knn_bruteforce_ids(coords: np.ndarray, k: int) -> np.ndarray:
    return _active.brute_ids(coords, k)


def knn_grid_ids(coords: np.ndarray, k: int, cell: float) -> np.ndarray:
    return _active.grid_ids(coords, k, cell)
