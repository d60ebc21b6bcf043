"""Local KNN graphs and the trainable edge projector.

Neighbor lists are exact nearest neighbors under squared L2 with ties broken
by (distance, id) ascending; row i is [i, nearest, next, ...] of width
min(K, N). The grid-accelerated search must return arrays identical to the
brute-force definition.

The projector maps each edge feature concat(center, neighbor) through
linear -> batch norm -> ReLU and aggregates a node's edges by elementwise
max. Batch norm statistics pool over all N*K edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels.common import default_cell
from .numerics import (
    BatchNormCache,
    BatchNormState,
    LinearParams,
    ShapeMismatchError,
    as_matrix,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
)


def _check_coords(coords, op: str) -> np.ndarray:
    c = np.ascontiguousarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] not in (2, 3):
        raise ShapeMismatchError(op, "(n, 2) or (n, 3) coordinates", c.shape)
    if c.shape[0] < 1:
        raise ValueError(f"{op}: need at least one point")
    if not np.isfinite(c).all():
        raise ValueError(f"{op}: coordinates must be finite")
    return c


def knn_bruteforce(coords: np.ndarray, k: int) -> np.ndarray:
    """Exact KNN lists (n, min(k, n)) by scanning every pair."""
    c = _check_coords(coords, "knn_bruteforce")
    if k < 1:
        raise ValueError(f"knn_bruteforce: k must be >= 1, got {k}")
    return _kernels.knn_bruteforce_ids(c, int(k))


def knn_grid(coords: np.ndarray, k: int, cell_size: float | None = None) -> np.ndarray:
    """Bucket-grid KNN with expanding ring search; identical to brute force.

    cell_size tunes speed only (None or 0 picks a density heuristic); the
    search expands rings until the worst kept distance is certified inside
    the scanned radius, so results never depend on it.
    """
    c = _check_coords(coords, "knn_grid")
    if k < 1:
        raise ValueError(f"knn_grid: k must be >= 1, got {k}")
    if cell_size is None or cell_size == 0:
        cell = default_cell(c)
    elif cell_size > 0:
        cell = float(cell_size)
    else:
        raise ValueError(f"knn_grid: cell_size must be positive, got {cell_size}")
    return _kernels.knn_grid_ids(c, int(k), cell)


def _check_neighbors(neighbors, n: int, op: str) -> np.ndarray:
    nb = np.ascontiguousarray(neighbors, dtype=np.int64)
    if nb.ndim != 2 or nb.shape[0] != n:
        raise ShapeMismatchError(op, f"({n}, k) neighbor lists", nb.shape)
    if nb.size and (nb.min() < 0 or nb.max() >= n):
        raise ValueError(f"{op}: neighbor ids outside [0, {n})")
    return nb


def build_edge_features(features: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Edge tensor (n, k, 2c): E[i, j] = concat(features[i], features[nb[i, j]])."""
    A = as_matrix(features, "build_edge_features")
    n, c = A.shape
    nb = _check_neighbors(neighbors, n, "build_edge_features")
    k = nb.shape[1]
    E = np.empty((n, k, 2 * c))
    E[:, :, :c] = A[:, None, :]
    E[:, :, c:] = A[nb]
    return E


@dataclass
class GammaParams:
    """Edge projector weights; owner tags which side (student/teacher) holds it."""

    linear: LinearParams
    bn: BatchNormState
    owner: str = ""

    @classmethod
    def create(cls, feature_width: int, out_width: int, rng: np.random.Generator,
               owner: str = "") -> "GammaParams":
        return cls(
            linear=LinearParams.create(2 * feature_width, out_width, rng),
            bn=BatchNormState.create(out_width),
            owner=owner,
        )

    @property
    def out_width(self) -> int:
        return self.linear.out_width


@dataclass
class GammaGrads:
    dW: np.ndarray
    db: np.ndarray
    dgamma: np.ndarray
    dbeta: np.ndarray


@dataclass
class GraphConvCache:
    E: np.ndarray
    neighbors: np.ndarray
    post_bn: np.ndarray
    bn_cache: BatchNormCache
    argmax: np.ndarray


def graph_conv_forward(E: np.ndarray, p: GammaParams, neighbors: np.ndarray,
                       bn_mode: str | None = None):
    """Project edges and max-pool per node. Returns (G, cache), G is (n, c_out)."""
    if E.ndim != 3 or E.shape[2] != p.linear.in_width:
        raise ShapeMismatchError(
            "graph_conv_forward", f"(n, k, {p.linear.in_width}) edge tensor", E.shape
        )
    n, k, two_c = E.shape
    nb = _check_neighbors(neighbors, n, "graph_conv_forward")
    if nb.shape[1] != k:
        raise ShapeMismatchError("graph_conv_forward", f"({n}, {k}) neighbors", nb.shape)
    flat = E.reshape(n * k, two_c)
    pre_bn = linear_forward(p.linear, flat)
    post_bn, bn_cache = batchnorm_forward(p.bn, pre_bn, mode=bn_mode)
    act = relu(post_bn).reshape(n, k, -1)
    argmax = act.argmax(axis=1)
    G = np.take_along_axis(act, argmax[:, None, :], axis=1)[:, 0, :]
    cache = GraphConvCache(E=E, neighbors=nb, post_bn=post_bn,
                           bn_cache=bn_cache, argmax=argmax)
    return G, cache


def graph_conv_backward(p: GammaParams, cache: GraphConvCache, dG: np.ndarray):
    """Backward through max-pool, ReLU, batch norm, linear, and edge gather.

    Returns (dA, GammaGrads): dA accumulates each node's gradient from its
    centroid slot in its own edges plus every edge that references it as a
    neighbor. Max-pool routes gradient to the first argmax edge per channel.
    """
    n, k, two_c = cache.E.shape
    c_out = p.linear.out_width
    if dG.shape != (n, c_out):
        raise ShapeMismatchError("graph_conv_backward", f"({n}, {c_out})", dG.shape)
    dact = np.zeros((n, k, c_out))
    np.put_along_axis(dact, cache.argmax[:, None, :], dG[:, None, :], axis=1)
    dpost = relu_backward(cache.post_bn, dact.reshape(n * k, c_out))
    dpre, dgamma, dbeta = batchnorm_backward(p.bn, cache.bn_cache, dpost)
    dflat, dW, db = linear_backward(p.linear, cache.E.reshape(n * k, two_c), dpre)
    dE = dflat.reshape(n, k, two_c)
    c = two_c // 2
    dA = dE[:, :, :c].sum(axis=1)
    np.add.at(dA, cache.neighbors, dE[:, :, c:])
    return dA, GammaGrads(dW=dW, db=db, dgamma=dgamma, dbeta=dbeta)
