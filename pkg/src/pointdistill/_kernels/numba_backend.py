"""Numba-jitted KNN kernels (the default backend).

Kernels keep IEEE semantics (no fastmath) and accumulate squared distances
in axis order, so outputs are bit-identical to the numpy backend. Queries
are independent, so rows parallelize with deterministic results.
"""

from __future__ import annotations

import os

import numpy as np
import numba
from numba import njit, prange

from .common import RING_SAFETY, prepare_buckets

_cap = os.environ.get("POINTDISTILL_THREADS")
if _cap:
    try:
        numba.set_num_threads(max(1, min(int(_cap), numba.config.NUMBA_NUM_THREADS)))
    except (ValueError, RuntimeError):
        pass


@njit(cache=True, inline="always")
def _insert(bd, bi, m, s, dist, j):
    """Keep (bd, bi) sorted ascending by (distance, id) with at most s entries."""
    if m == s:
        last = s - 1
        if dist > bd[last] or (dist == bd[last] and j > bi[last]):
            return m
        p = last
    else:
        p = m
        m += 1
    while p > 0 and (bd[p - 1] > dist or (bd[p - 1] == dist and bi[p - 1] > j)):
        bd[p] = bd[p - 1]
        bi[p] = bi[p - 1]
        p -= 1
    bd[p] = dist
    bi[p] = j
    return m


@njit(cache=True, parallel=True)
def _brute_kernel(coords, k):
    n, d = coords.shape
    kk = min(k, n)
    out = np.empty((n, kk), dtype=np.int64)
    s = kk - 1
    for i in prange(n):
        out[i, 0] = i
        if s == 0:
            continue
        bd = np.empty(s, dtype=np.float64)
        bi = np.empty(s, dtype=np.int64)
        m = 0
        for j in range(n):
            if j == i:
                continue
            dist = 0.0
            for a in range(d):
                diff = coords[j, a] - coords[i, a]
                dist += diff * diff
            m = _insert(bd, bi, m, s, dist, j)
        for t in range(s):
            out[i, 1 + t] = bi[t]
    return out


@njit(cache=True, inline="always")
def _scan_bucket_2d(coords, order, starts, f, i, bd, bi, m, s):
    for t in range(starts[f], starts[f + 1]):
        j = order[t]
        if j == i:
            continue
        dx = coords[j, 0] - coords[i, 0]
        dist = dx * dx
        dy = coords[j, 1] - coords[i, 1]
        dist += dy * dy
        m = _insert(bd, bi, m, s, dist, j)
    return m


@njit(cache=True, inline="always")
def _scan_bucket_3d(coords, order, starts, f, i, bd, bi, m, s):
    for t in range(starts[f], starts[f + 1]):
        j = order[t]
        if j == i:
            continue
        dx = coords[j, 0] - coords[i, 0]
        dist = dx * dx
        dy = coords[j, 1] - coords[i, 1]
        dist += dy * dy
        dz = coords[j, 2] - coords[i, 2]
        dist += dz * dz
        m = _insert(bd, bi, m, s, dist, j)
    return m


@njit(cache=True, parallel=True)
def _grid_kernel_2d(coords, cidx, dims, order, starts, k, cell, safety):
    n = coords.shape[0]
    kk = min(k, n)
    out = np.empty((n, kk), dtype=np.int64)
    s = kk - 1
    dimx = dims[0]
    dimy = dims[1]
    for i in prange(n):
        out[i, 0] = i
        if s == 0:
            continue
        bd = np.empty(s, dtype=np.float64)
        bi = np.empty(s, dtype=np.int64)
        m = 0
        cx = cidx[i, 0]
        cy = cidx[i, 1]
        rmax = max(max(cx, dimx - 1 - cx), max(cy, dimy - 1 - cy))
        r = 0
        while True:
            for oy in range(-r, r + 1):
                y = cy + oy
                if y < 0 or y >= dimy:
                    continue
                ay = -oy if oy < 0 else oy
                if ay == r:
                    x0 = cx - r if cx - r > 0 else 0
                    x1 = cx + r if cx + r < dimx - 1 else dimx - 1
                    for x in range(x0, x1 + 1):
                        m = _scan_bucket_2d(coords, order, starts, y * dimx + x,
                                            i, bd, bi, m, s)
                else:
                    x = cx - r
                    if x >= 0:
                        m = _scan_bucket_2d(coords, order, starts, y * dimx + x,
                                            i, bd, bi, m, s)
                    x = cx + r
                    if x <= dimx - 1:
                        m = _scan_bucket_2d(coords, order, starts, y * dimx + x,
                                            i, bd, bi, m, s)
            if m == s:
                bound = r * cell * safety
                if bd[s - 1] < bound * bound:
                    break
            if r >= rmax:
                break
            r += 1
        for t in range(s):
            out[i, 1 + t] = bi[t]
    return out


@njit(cache=True, parallel=True)
def _grid_kernel_3d(coords, cidx, dims, order, starts, k, cell, safety):
    n = coords.shape[0]
    kk = min(k, n)
    out = np.empty((n, kk), dtype=np.int64)
    s = kk - 1
    dimx = dims[0]
    dimy = dims[1]
    dimz = dims[2]
    for i in prange(n):
        out[i, 0] = i
        if s == 0:
            continue
        bd = np.empty(s, dtype=np.float64)
        bi = np.empty(s, dtype=np.int64)
        m = 0
        cx = cidx[i, 0]
        cy = cidx[i, 1]
        cz = cidx[i, 2]
        rmax = max(max(cx, dimx - 1 - cx),
                   max(max(cy, dimy - 1 - cy), max(cz, dimz - 1 - cz)))
        r = 0
        while True:
            for oz in range(-r, r + 1):
                z = cz + oz
                if z < 0 or z >= dimz:
                    continue
                az = -oz if oz < 0 else oz
                for oy in range(-r, r + 1):
                    y = cy + oy
                    if y < 0 or y >= dimy:
                        continue
                    ay = -oy if oy < 0 else oy
                    base = z * dimy + y
                    if az == r or ay == r:
                        x0 = cx - r if cx - r > 0 else 0
                        x1 = cx + r if cx + r < dimx - 1 else dimx - 1
                        for x in range(x0, x1 + 1):
                            m = _scan_bucket_3d(coords, order, starts,
                                                base * dimx + x, i, bd, bi, m, s)
                    else:
                        x = cx - r
                        if x >= 0:
                            m = _scan_bucket_3d(coords, order, starts,
                                                base * dimx + x, i, bd, bi, m, s)
                        x = cx + r
                        if x <= dimx - 1:
                            m = _scan_bucket_3d(coords, order, starts,
                                                base * dimx + x, i, bd, bi, m, s)
            if m == s:
                bound = r * cell * safety
                if bd[s - 1] < bound * bound:
                    break
            if r >= rmax:
                break
            r += 1
        for t in range(s):
            out[i, 1 + t] = bi[t]
    return out


def brute_ids(coords: np.ndarray, k: int) -> np.ndarray:
    return _brute_kernel(coords, k)


def grid_ids(coords: np.ndarray, k: int, cell: float) -> np.ndarray:
    d = coords.shape[1]
    cell, cidx, dims, order, starts = prepare_buckets(coords, cell)
    kernel = _grid_kernel_2d if d == 2 else _grid_kernel_3d
    return kernel(coords, cidx, dims, order, starts, k, cell, RING_SAFETY)
