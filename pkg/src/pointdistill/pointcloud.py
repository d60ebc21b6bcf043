"""Point cloud container, lidar .bin frame IO, and synthetic scene generation.

Frame files follow the common lidar dump layout: a headerless sequence of
little-endian float32 records (x, y, z, intensity). Values are widened to
float64 on load, so a load/write round trip is byte identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 16  # four little-endian float32 per point


@dataclass
class PointCloud:
    """points has shape (n, 4) float64: x, y, z, intensity."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"PointCloud: points must be (n, 4), got {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class SceneSpec:
    """Synthetic scene recipe: ground scatter, Gaussian clusters, outliers."""

    n_ground: int = 4000
    n_clusters: int = 12
    points_per_cluster: tuple[int, int] = (80, 150)
    cluster_extent: float = 0.5
    ground_extent: float = 40.0
    n_noise: int = 400
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.points_per_cluster
        if self.n_ground < 0 or self.n_clusters < 0 or self.n_noise < 0:
            raise ValueError("SceneSpec: counts must be non-negative")
        if lo < 0 or hi < lo:
            raise ValueError(f"SceneSpec: bad points_per_cluster range ({lo}, {hi})")
        if self.cluster_extent <= 0 or self.ground_extent <= 0:
            raise ValueError("SceneSpec: extents must be positive")


def load_point_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        raise ValueError(
            f"truncated frame {path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}"
        )
    pts = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite values in {path} at point {idx}")
    return PointCloud(points=pts, frame_id=path.stem)


def write_point_cloud(cloud: PointCloud, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def frame_seeds(seed: int, count: int) -> list[int]:
    """Deterministic per-frame seeds derived from one run seed."""
    if count < 0:
        raise ValueError("frame_seeds: negative count")
    state = np.random.SeedSequence(seed).generate_state(max(count, 1), np.uint64)
    return [int(s) for s in state[:count]]


def synth_scene(spec: SceneSpec) -> PointCloud:
    """Generate a deterministic synthetic lidar-like scene.

    Three components, each drawn from its own split of the seed stream so
    component sizes can change without perturbing the other components:
    a uniform ground-plane scatter at z = 0, n_clusters isotropic Gaussian
    blobs (sigma = cluster_extent) centered at random ground positions, and
    uniform outlier noise spanning the cluster slab.
    """
    spec.validate()
    ground_ss, cluster_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(3)
    parts = []

    g = np.random.Generator(np.random.PCG64(ground_ss))
    if spec.n_ground > 0:
        xy = g.uniform(-spec.ground_extent, spec.ground_extent, size=(spec.n_ground, 2))
        z = np.zeros((spec.n_ground, 1))
        inten = g.uniform(0.0, 1.0, size=(spec.n_ground, 1))
        parts.append(np.hstack([xy, z, inten]))

    c = np.random.Generator(np.random.PCG64(cluster_ss))
    if spec.n_clusters > 0:
        lo, hi = spec.points_per_cluster
        sizes = c.integers(lo, hi + 1, size=spec.n_clusters)
        centers_xy = c.uniform(-spec.ground_extent, spec.ground_extent,
                               size=(spec.n_clusters, 2))
        total = int(sizes.sum())
        if total > 0:
            centers = np.column_stack([centers_xy, np.zeros(spec.n_clusters)])
            anchor = np.repeat(centers, sizes, axis=0)
            jitter = c.normal(0.0, spec.cluster_extent, size=(total, 3))
            inten = c.uniform(0.0, 1.0, size=(total, 1))
            parts.append(np.hstack([anchor + jitter, inten]))

    r = np.random.Generator(np.random.PCG64(noise_ss))
    if spec.n_noise > 0:
        xy = r.uniform(-spec.ground_extent, spec.ground_extent, size=(spec.n_noise, 2))
        zspan = 2.0 * spec.cluster_extent
        z = r.uniform(-zspan, zspan, size=(spec.n_noise, 1))
        inten = r.uniform(0.0, 1.0, size=(spec.n_noise, 1))
        parts.append(np.hstack([xy, z, inten]))

    if parts:
        pts = np.vstack(parts)
    else:
        pts = np.empty((0, 4))
    return PointCloud(points=pts, frame_id=f"synth-{spec.seed}")
