import math

import numpy as np
import pytest

from pointdistill.pointcloud import PointCloud, SceneSpec, synth_scene
from pointdistill.sampler import (
    phi_entropy,
    point_importance,
    reweight_point,
    reweight_voxel,
    top_n_select,
    voxel_importance,
)
from pointdistill.voxelizer import GridConfig, voxel_input_features, voxelize


def scene_grid(seed=0):
    cloud = synth_scene(SceneSpec(seed=seed))
    grid = voxelize(cloud, GridConfig((-40, -40, -3), (0.5, 0.5, 0.5), (40, 40, 3)))
    return cloud, grid


def test_voxel_importance_is_count():
    _, grid = scene_grid()
    s = voxel_importance(grid)
    assert s.kind == "voxel_count"
    assert np.array_equal(s.scores, grid.counts.astype(np.float64))


def test_point_importance_is_channel_max():
    rng = np.random.default_rng(1)
    F = rng.normal(size=(30, 6))
    s = point_importance(F)
    assert s.kind == "channel_max"
    assert np.array_equal(s.scores, F.max(axis=1))


def test_top_n_select_orders_by_score_then_index():
    scores = np.array([3.0, 1.0, 3.0, 5.0, 1.0])
    coords = np.arange(15, dtype=np.float64).reshape(5, 3)
    feats = np.arange(10, dtype=np.float64).reshape(5, 2)
    from pointdistill.sampler import ImportanceScores

    sel = top_n_select(ImportanceScores(scores, "voxel_count"), coords, feats, 3)
    # Ties broken by ascending original index: 3, then 0 before 2.
    assert sel.indices.tolist() == [3, 0, 2]
    assert np.array_equal(sel.coords, coords[[3, 0, 2]])
    assert np.array_equal(sel.features, feats[[3, 0, 2]])
    assert sel.n_effective == 3


def test_top_n_select_brute_force_oracle():
    rng = np.random.default_rng(2)
    for trial in range(30):
        m = int(rng.integers(1, 40))
        n = int(rng.integers(1, 50))
        scores = rng.integers(0, 6, size=m).astype(np.float64)
        coords = rng.normal(size=(m, 3))
        feats = rng.normal(size=(m, 4))
        from pointdistill.sampler import ImportanceScores

        sel = top_n_select(ImportanceScores(scores, "voxel_count"), coords, feats, n)
        oracle = sorted(range(m), key=lambda i: (-scores[i], i))[: min(n, m)]
        assert sel.indices.tolist() == oracle, trial


def test_top_n_select_truncates_to_available():
    from pointdistill.sampler import ImportanceScores

    sel = top_n_select(ImportanceScores(np.array([1.0, 2.0]), "voxel_count"),
                       np.zeros((2, 3)), np.zeros((2, 4)), 10)
    assert sel.n_effective == 2
    assert sel.requested_n == 10


def test_reweight_voxel_two_count_example():
    phi = reweight_voxel(np.array([2, 1]), tau=1.0)
    assert np.allclose(phi, [0.73105858, 0.26894142], atol=1e-8)


def test_reweight_voxel_rejects_nonpositive_counts():
    with pytest.raises(ValueError):
        reweight_voxel(np.array([2, 0]), tau=1.0)


def test_reweight_point_uses_row_max():
    G = np.array([[1.0, 5.0], [2.0, 2.0]])
    phi = reweight_point(G, tau=1.0)
    manual = np.exp([5.0, 2.0] - np.max([5.0, 2.0]))
    assert np.allclose(phi, manual / manual.sum())


def test_reweight_high_tau_approaches_uniform():
    rng = np.random.default_rng(3)
    counts = rng.integers(1, 200, size=64)
    phi = reweight_voxel(counts, tau=1e6)
    assert np.allclose(phi, 1.0 / 64, rtol=1e-3)


def test_reweight_preserves_argmax_and_probability():
    rng = np.random.default_rng(4)
    for tau in (0.1, 1.0, 10.0, 1e6):
        scores = rng.normal(size=100)
        from pointdistill.numerics import softmax_temp

        phi = softmax_temp(scores, tau)
        assert abs(phi.sum() - 1.0) < 1e-12
        assert (phi > 0).all()
        assert int(np.argmax(phi)) == int(np.argmax(scores))


def test_phi_entropy_uniform_and_point_mass():
    assert math.isclose(phi_entropy(np.full(8, 1 / 8)), math.log(8))
    assert phi_entropy(np.array([1.0, 0.0, 0.0])) == 0.0


def test_selection_pipeline_on_scene():
    cloud, grid = scene_grid(seed=9)
    X = voxel_input_features(grid, cloud)
    sel = top_n_select(voxel_importance(grid), grid.knn_coords(), X, 256)
    assert sel.n_effective == 256
    # Selected counts dominate the rest: min selected >= max unselected.
    mask = np.zeros(grid.n_voxels, dtype=bool)
    mask[sel.indices] = True
    assert grid.counts[sel.indices].min() >= grid.counts[~mask].max()
