"""Shared bucket-grid preparation for the KNN kernels.

Both backends accumulate squared distances in axis order over float64, so
ties resolve identically everywhere. The cell size is a speed knob only:
ring-expansion certification makes results exact for any positive cell.
"""

from __future__ import annotations

import numpy as np

# Bucket table is capped near this many cells per point; a pathologically
# small cell size is doubled until the table fits.
MAX_CELLS_PER_POINT = 4

# Certification shrinks the ring boundary by this factor so float rounding in
# bucket assignment or distance accumulation can never cause an early stop.
RING_SAFETY = 1.0 - 1e-9


def default_cell(coords: np.ndarray) -> float:
    """Heuristic cell size targeting a few points per bucket."""
    n, d = coords.shape
    span = coords.max(axis=0) - coords.min(axis=0)
    top = float(span.max()) if n > 0 else 0.0
    if top <= 0.0:
        return 1.0
    span = np.where(span > 0.0, span, top)
    cell = 2.0 * float((span.prod() / n) ** (1.0 / d))
    return max(cell, top * 1e-9)


def prepare_buckets(coords: np.ndarray, cell: float):
    """Bucket points into a uniform grid.

    Returns (cell, cidx, dims, order, starts): the effective cell size, each
    point's per-axis cell index, cells per axis, point ids sorted by flat
    cell id (ascending id within a cell), and CSR starts into that order.
    """
    n, d = coords.shape
    if cell is None or cell <= 0.0:
        cell = default_cell(coords)
    mins = coords.min(axis=0)
    span = coords.max(axis=0) - mins
    limit = MAX_CELLS_PER_POINT * n + 1024
    while True:
        dims = np.floor(span / cell).astype(np.int64) + 1
        if int(dims.prod()) <= limit:
            break
        cell *= 2.0
    cidx = np.floor((coords - mins) / cell).astype(np.int64)
    np.clip(cidx, 0, dims - 1, out=cidx)

    flat = cidx[:, d - 1].copy()
    for a in range(d - 2, -1, -1):
        flat *= dims[a]
        flat += cidx[:, a]
    n_cells = int(dims.prod())
    counts = np.bincount(flat, minlength=n_cells)
    starts = np.zeros(n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    order = np.argsort(flat, kind="stable").astype(np.int64)
    return cell, cidx, dims, order, starts
