"""Sparse voxel (or pillar) grid construction over a point cloud.

Cell index convention: floor((p - origin) / voxel_size) per axis, half-open
cells. Points below origin or at/above bounds on any axis are discarded and
tallied. Occupied cells are stored sparsely, sorted by (iz, iy, ix).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud

VOXEL_FEATURE_DIM = 8

MODES = ("voxel", "pillar")


def _vec3(v, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"GridConfig: {name} must have 3 components, got {arr.shape}")
    return arr


@dataclass
class GridConfig:
    """Axis-aligned grid over [origin, bounds) with per-axis cell sizes.

    In pillar mode the z cell size must span the full z range so exactly one
    z bin exists; neighbor search then runs over 2-d birds-eye-view centers.
    """

    origin: np.ndarray
    voxel_size: np.ndarray
    bounds: np.ndarray
    mode: str = "voxel"

    def __post_init__(self) -> None:
        self.origin = _vec3(self.origin, "origin")
        self.voxel_size = _vec3(self.voxel_size, "voxel_size")
        self.bounds = _vec3(self.bounds, "bounds")

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"GridConfig: mode must be one of {MODES}, got {self.mode!r}")
        if not (self.voxel_size > 0).all():
            raise ValueError(f"GridConfig: voxel_size must be positive, got {self.voxel_size}")
        if not (self.bounds > self.origin).all():
            raise ValueError(
                f"GridConfig: bounds {self.bounds} must exceed origin {self.origin}"
            )
        if self.mode == "pillar":
            zspan = self.bounds[2] - self.origin[2]
            if self.voxel_size[2] < zspan:
                raise ValueError(
                    f"GridConfig: pillar mode needs voxel_size z >= z span {zspan}, "
                    f"got {self.voxel_size[2]}"
                )


@dataclass
class VoxelGrid:
    """Occupied cells of a voxelized cloud, CSR-style point membership.

    cells[i] is the (ix, iy, iz) index triple of occupied cell i; rows are
    sorted by (iz, iy, ix). point_ids[offsets[i]:offsets[i+1]] are the cloud
    point ids inside cell i, in load order. centers are geometric cell
    centers. n_discarded counts points that fell outside the grid.
    """

    config: GridConfig
    cells: np.ndarray
    point_ids: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray
    centers: np.ndarray
    n_discarded: int

    @property
    def n_voxels(self) -> int:
        return int(self.cells.shape[0])

    def points_in(self, i: int) -> np.ndarray:
        return self.point_ids[self.offsets[i]:self.offsets[i + 1]]

    def knn_coords(self) -> np.ndarray:
        """Coordinates used for neighbor search: 2-d BEV centers in pillar mode."""
        if self.config.mode == "pillar":
            return np.ascontiguousarray(self.centers[:, :2])
        return self.centers


def voxelize(cloud: PointCloud, cfg: GridConfig) -> VoxelGrid:
    cfg.validate()
    p = cloud.xyz
    n = p.shape[0]
    if n == 0:
        keep = np.empty(0, dtype=np.int64)
    else:
        inside = (p >= cfg.origin).all(axis=1) & (p < cfg.bounds).all(axis=1)
        keep = np.flatnonzero(inside)

    if keep.size == 0:
        empty_i = np.empty((0, 3), dtype=np.int64)
        return VoxelGrid(
            config=cfg,
            cells=empty_i,
            point_ids=np.empty(0, dtype=np.int64),
            offsets=np.zeros(1, dtype=np.int64),
            counts=np.empty(0, dtype=np.int64),
            centers=np.empty((0, 3)),
            n_discarded=n,
        )

    idx = np.floor((p[keep] - cfg.origin) / cfg.voxel_size).astype(np.int64)
    if cfg.mode == "pillar":
        # Validation guarantees one z bin; clamp guards float boundary rounding.
        idx[:, 2] = 0

    # Sort cells by (iz, iy, ix), point ids ascending (= load order) within a cell.
    order = np.lexsort((keep, idx[:, 0], idx[:, 1], idx[:, 2]))
    sidx = idx[order]
    spid = keep[order]
    change = np.empty(sidx.shape[0], dtype=bool)
    change[0] = True
    change[1:] = (sidx[1:] != sidx[:-1]).any(axis=1)
    starts = np.flatnonzero(change)
    offsets = np.append(starts, sidx.shape[0]).astype(np.int64)
    cells = np.ascontiguousarray(sidx[starts])
    counts = np.diff(offsets)
    centers = cfg.origin + (cells + 0.5) * cfg.voxel_size
    return VoxelGrid(
        config=cfg,
        cells=cells,
        point_ids=spid,
        offsets=offsets,
        counts=counts,
        centers=centers,
        n_discarded=n - keep.size,
    )


def voxel_input_features(grid: VoxelGrid, cloud: PointCloud) -> np.ndarray:
    """Per-voxel encoder input, shape (n_voxels, 8).

    Columns: mean x, mean y, mean z, mean intensity, center x, center y,
    center z, log(1 + count).
    """
    if grid.n_voxels == 0:
        return np.empty((0, VOXEL_FEATURE_DIM))
    if grid.point_ids.size and int(grid.point_ids.max()) >= len(cloud):
        raise ValueError(
            f"voxel_input_features: grid references point {int(grid.point_ids.max())} "
            f"but cloud has {len(cloud)} points"
        )
    member = cloud.points[grid.point_ids]
    sums = np.add.reduceat(member, grid.offsets[:-1], axis=0)
    means = sums / grid.counts[:, None]
    out = np.empty((grid.n_voxels, VOXEL_FEATURE_DIM))
    out[:, 0:4] = means
    out[:, 4:7] = grid.centers
    out[:, 7] = np.log1p(grid.counts)
    return out


def count_histogram(grid: VoxelGrid) -> np.ndarray:
    """hist[c] = number of occupied voxels holding exactly c points (hist[0] = 0)."""
    if grid.n_voxels == 0:
        return np.zeros(1, dtype=np.int64)
    return np.bincount(grid.counts)


def single_point_fraction(grid: VoxelGrid) -> float:
    """Fraction of occupied voxels holding exactly one point."""
    if grid.n_voxels == 0:
        raise ValueError("single_point_fraction: grid has no occupied voxels")
    hist = count_histogram(grid)
    one = int(hist[1]) if hist.shape[0] > 1 else 0
    return one / grid.n_voxels
