"""Pure numpy implementations of the KNN kernels.

Semantics are identical to the numba backend: squared L2 distance
accumulated in axis order, ties broken by (distance, id) ascending, row
layout [self, nearest, ...]. This path exists as the fallback when numba is
unavailable or disabled; it favors clarity over peak speed.
"""

from __future__ import annotations

import numpy as np

from .common import RING_SAFETY, prepare_buckets


def _rowwise_rank(ids: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Order candidate columns per row by (distance, id) via two stable sorts."""
    by_id = np.argsort(ids, axis=-1, kind="stable")
    ids = np.take_along_axis(ids, by_id, axis=-1)
    dist = np.take_along_axis(dist, by_id, axis=-1)
    by_dist = np.argsort(dist, axis=-1, kind="stable")
    return np.take_along_axis(ids, by_dist, axis=-1)


def brute_ids(coords: np.ndarray, k: int) -> np.ndarray:
    n, d = coords.shape
    kk = min(k, n)
    out = np.empty((n, kk), dtype=np.int64)
    out[:, 0] = np.arange(n)
    s = kk - 1
    if s == 0:
        return out

    block = max(1, 4_000_000 // n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        q = coords[start:stop]
        D = np.zeros((stop - start, n))
        for a in range(d):
            diff = q[:, a, None] - coords[None, :, a]
            D += diff * diff
        rows = np.arange(stop - start)
        D[rows, start + rows] = np.inf  # exclude self

        part = np.argpartition(D, s - 1, axis=1)[:, :s]
        pd = np.take_along_axis(D, part, axis=1)
        border = pd.max(axis=1)
        ranked = _rowwise_rank(part, pd)
        # Rows where candidates tie exactly at the border need an exact redo,
        # since argpartition picks arbitrarily among equal distances.
        n_at_or_below = (D <= border[:, None]).sum(axis=1)
        exact = n_at_or_below == s
        out[start + rows[exact], 1:] = ranked[exact]
        for r in np.flatnonzero(~exact):
            drow = D[r]
            cand = np.flatnonzero(drow <= border[r])  # ascending id already
            order = np.argsort(drow[cand], kind="stable")
            out[start + r, 1:] = cand[order][:s]
    return out


def _shell_cells(c: np.ndarray, dims: np.ndarray, r: int) -> list[int]:
    """Flat ids of in-grid cells at Chebyshev radius exactly r from cell c."""
    cells: list[int] = []
    d = c.shape[0]
    if d == 2:
        cx, cy = int(c[0]), int(c[1])
        dimx, dimy = int(dims[0]), int(dims[1])
        for oy in range(-r, r + 1):
            y = cy + oy
            if y < 0 or y >= dimy:
                continue
            if abs(oy) == r:
                xs = range(max(cx - r, 0), min(cx + r, dimx - 1) + 1)
            else:
                xs = [x for x in (cx - r, cx + r) if 0 <= x < dimx]
            for x in xs:
                cells.append(y * dimx + x)
    else:
        cx, cy, cz = int(c[0]), int(c[1]), int(c[2])
        dimx, dimy, dimz = int(dims[0]), int(dims[1]), int(dims[2])
        for oz in range(-r, r + 1):
            z = cz + oz
            if z < 0 or z >= dimz:
                continue
            for oy in range(-r, r + 1):
                y = cy + oy
                if y < 0 or y >= dimy:
                    continue
                if abs(oz) == r or abs(oy) == r:
                    xs = range(max(cx - r, 0), min(cx + r, dimx - 1) + 1)
                else:
                    xs = [x for x in (cx - r, cx + r) if 0 <= x < dimx]
                for x in xs:
                    cells.append((z * dimy + y) * dimx + x)
    return cells


def grid_ids(coords: np.ndarray, k: int, cell: float) -> np.ndarray:
    n, d = coords.shape
    kk = min(k, n)
    out = np.empty((n, kk), dtype=np.int64)
    out[:, 0] = np.arange(n)
    s = kk - 1
    if s == 0:
        return out

    cell, cidx, dims, order, starts = prepare_buckets(coords, cell)
    for i in range(n):
        c = cidx[i]
        rmax = int(np.maximum(c, dims - 1 - c).max())
        pool_ids: list[np.ndarray] = []
        pool_dist: list[np.ndarray] = []
        found = 0
        r = 0
        while True:
            for f in _shell_cells(c, dims, r):
                beg, end = starts[f], starts[f + 1]
                if beg == end:
                    continue
                ids = order[beg:end]
                ids = ids[ids != i]
                if ids.size == 0:
                    continue
                dist = np.zeros(ids.shape[0])
                for a in range(d):
                    diff = coords[ids, a] - coords[i, a]
                    dist += diff * diff
                pool_ids.append(ids)
                pool_dist.append(dist)
                found += ids.size
            if found >= s:
                alld = np.concatenate(pool_dist)
                kth = np.partition(alld, s - 1)[s - 1]
                bound = r * cell * RING_SAFETY
                if kth < bound * bound:
                    break
            if r >= rmax:
                break
            r += 1
        ids = np.concatenate(pool_ids)
        dist = np.concatenate(pool_dist)
        out[i, 1:] = _rowwise_rank(ids, dist)[:s]
    return out
