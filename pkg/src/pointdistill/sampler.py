"""Importance scoring, top-N candidate selection, and loss reweighting.

Scores come from the teacher side only: either per-voxel point counts or the
per-row channel max of teacher features. Selection keeps the N highest
scores, breaking ties by ascending original index, so equal-score candidates
never reorder based on payload.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeMismatchError, softmax_temp
from .voxelizer import VoxelGrid

IMPORTANCE_KINDS = ("voxel_count", "channel_max")


@dataclass
class ImportanceScores:
    scores: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if self.kind not in IMPORTANCE_KINDS:
            raise ValueError(f"ImportanceScores: kind must be one of {IMPORTANCE_KINDS}")


@dataclass
class SelectedSet:
    """Top-N candidates ordered by descending score (ties: ascending index)."""

    indices: np.ndarray
    coords: np.ndarray
    scores: np.ndarray
    features: np.ndarray
    requested_n: int

    @property
    def n_effective(self) -> int:
        return int(self.indices.shape[0])


def voxel_importance(grid: VoxelGrid) -> ImportanceScores:
    """Importance of each occupied voxel = its point count."""
    if grid.n_voxels == 0:
        raise ValueError("voxel_importance: grid has no occupied voxels")
    return ImportanceScores(scores=grid.counts.astype(np.float64), kind="voxel_count")


def point_importance(features: np.ndarray) -> ImportanceScores:
    """Importance of each candidate = channel max of its (teacher) feature row."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] < 1:
        raise ShapeMismatchError("point_importance", "(n, c) with c >= 1", F.shape)
    if F.shape[0] == 0:
        raise ValueError("point_importance: no candidates")
    return ImportanceScores(scores=F.max(axis=1), kind="channel_max")


def top_n_select(imp: ImportanceScores, coords: np.ndarray, features: np.ndarray,
                 n: int) -> SelectedSet:
    """Keep the n highest-scoring candidates (all of them if fewer than n)."""
    if n < 1:
        raise ValueError(f"top_n_select: n must be >= 1, got {n}")
    s = imp.scores
    m = s.shape[0]
    coords = np.asarray(coords, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if coords.shape[0] != m or features.shape[0] != m:
        raise ShapeMismatchError(
            "top_n_select", f"{m} rows of coords/features", (coords.shape[0], features.shape[0])
        )
    # lexsort: primary key is the last one; -s ascending = score descending,
    # equal scores fall back to ascending original index.
    order = np.lexsort((np.arange(m), -s))
    sel = order[: min(n, m)]
    return SelectedSet(
        indices=sel.astype(np.int64),
        coords=np.ascontiguousarray(coords[sel]),
        scores=s[sel],
        features=np.ascontiguousarray(features[sel]),
        requested_n=n,
    )


def reweight_voxel(counts: np.ndarray, tau: float) -> np.ndarray:
    """Per-graph weights phi = softmax(count / tau) over the selected set."""
    c = np.asarray(counts, dtype=np.float64).reshape(-1)
    if c.size and c.min() < 1:
        raise ValueError(f"reweight_voxel: counts must be >= 1, got min {c.min()}")
    return softmax_temp(c, tau)


def reweight_point(teacher_graph_features: np.ndarray, tau: float) -> np.ndarray:
    """Per-graph weights phi = softmax(row max of teacher graph features / tau)."""
    G = np.asarray(teacher_graph_features, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] < 1:
        raise ShapeMismatchError("reweight_point", "(n, c) with c >= 1", G.shape)
    return softmax_temp(G.max(axis=1), tau)


def phi_entropy(phi: np.ndarray) -> float:
    """Shannon entropy (nats) of a weight vector; 0 * log 0 taken as 0."""
    p = np.asarray(phi, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())
