import copy
import math

import numpy as np
import pytest

from pointdistill.distill import (
    DistillConfig,
    DistillError,
    TrainSetup,
    build_state,
    distill_loss,
    evaluate,
    forward_pipeline,
    pipeline_backward,
    train,
    train_step,
    trainable_params,
)
from pointdistill.encoders import (
    TeacherArtifact,
    TeacherConfig,
    encoder_from_doc,
    encoder_to_doc,
    gamma_from_doc,
    gamma_to_doc,
    make_teacher,
    param_hash,
)
from pointdistill.numerics import grad_check
from pointdistill.pointcloud import PointCloud, SceneSpec, synth_scene
from pointdistill.voxelizer import GridConfig

SMALL_SCENE = SceneSpec(n_ground=60, n_clusters=4, points_per_cluster=(10, 20),
                        cluster_extent=0.4, ground_extent=4.0, n_noise=10, seed=7)
SMALL_GRID = GridConfig((-5, -5, -3), (0.7, 0.7, 0.7), (5, 5, 3))


def small_setup(mode="local", reweight="importance", **kw):
    cfg = DistillConfig(mode=mode, reweight=reweight, n_select=40, k_neighbors=5,
                        c_out=12, steps=3, batch=1, seed=1, **kw)
    teacher = make_teacher(TeacherConfig(widths=(8, 16, 16), mode="frozen_random",
                                         seed=2))
    state = build_state(cfg, teacher, (8, 10, 10))
    cloud = synth_scene(SMALL_SCENE)
    return cfg, state, cloud


def mean_squared_distance_oracle(G_S, G_T):
    """Unweighted mean of phi-weighted squared row distances at phi = 1/N."""
    n = G_S.shape[0]
    total = math.fsum(
        math.fsum((float(G_S[i, c]) - float(G_T[i, c])) ** 2
                  for c in range(G_S.shape[1])) / n
        for i in range(n)
    )
    return total / n


def test_loss_zero_when_identical():
    G = np.random.default_rng(0).normal(size=(6, 4))
    phi = np.full(6, 1 / 6)
    loss, dG = distill_loss(G, G.copy(), phi)
    assert loss == 0.0
    assert np.array_equal(dG, np.zeros_like(G))


def test_loss_uniform_phi_matches_mean_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n, c = int(rng.integers(1, 30)), int(rng.integers(1, 8))
        G_S = rng.normal(size=(n, c))
        G_T = rng.normal(size=(n, c))
        loss, _ = distill_loss(G_S, G_T, np.full(n, 1.0 / n))
        assert abs(loss - mean_squared_distance_oracle(G_S, G_T)) < 1e-12


def test_loss_weights_are_monotone_in_row_distance():
    # Moving weight onto the farther row increases the loss.
    G_S = np.array([[0.0, 0.0], [0.0, 0.0]])
    G_T = np.array([[1.0, 0.0], [3.0, 0.0]])
    lo, _ = distill_loss(G_S, G_T, np.array([0.9, 0.1]))
    hi, _ = distill_loss(G_S, G_T, np.array([0.1, 0.9]))
    assert hi > lo


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(2)
    G_S = rng.normal(size=(8, 5))
    G_T = rng.normal(size=(8, 5))
    phi = rng.uniform(0.5, 1.5, size=8)
    phi /= phi.sum()

    def fn():
        loss, dG = distill_loss(G_S, G_T, phi)
        return loss, [dG]

    assert grad_check(fn, [G_S]) < 1e-9


def test_loss_rejects_bad_phi():
    G = np.zeros((3, 2))
    with pytest.raises(ValueError, match="phi"):
        distill_loss(G, G, np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ValueError, match="phi"):
        distill_loss(G, G, np.array([1.5, -0.25, -0.25]))


def test_loss_rejects_shape_mismatch():
    with pytest.raises(Exception):
        distill_loss(np.zeros((3, 2)), np.zeros((3, 3)), np.full(3, 1 / 3))


def test_build_state_local_vs_feature():
    cfg_l, state_l, _ = small_setup("local")
    assert state_l.gamma_s is not None and state_l.gamma_t is not None
    assert state_l.adapter is None
    assert state_l.gamma_s.linear.W.shape[0] == cfg_l.c_out

    _, state_f, _ = small_setup("feature")
    assert state_f.gamma_s is None and state_f.gamma_t is None
    # Adapter maps student width onto teacher width.
    assert state_f.adapter.W.shape == (16, 10)


def test_build_state_is_seed_deterministic():
    _, a, _ = small_setup()
    _, b, _ = small_setup()
    assert param_hash(a.student) == param_hash(b.student)
    assert np.array_equal(a.gamma_s.linear.W, b.gamma_s.linear.W)


def test_trainable_params_cover_all_sides():
    _, state, _ = small_setup()
    names = set(trainable_params(state))
    assert "student.0.W" in names and "student.1.beta" in names
    assert "gamma_s.W" in names and "gamma_t.W" in names
    _, state_f, _ = small_setup("feature")
    names_f = set(trainable_params(state_f))
    assert "adapter.W" in names_f and "gamma_s.W" not in names_f


def test_forward_pipeline_result_contract():
    cfg, state, cloud = small_setup()
    res = forward_pipeline(cloud, state, cfg, SMALL_GRID, bn_mode="eval")
    n = res.selection.n_effective
    assert res.g_student.shape == (n, cfg.c_out)
    assert res.g_teacher.shape == (n, cfg.c_out)
    assert res.neighbors.shape == (n, min(cfg.k_neighbors, n))
    assert abs(res.phi.sum() - 1.0) < 1e-9
    assert res.loss >= 0.0
    # Selection is teacher-side: scores do not depend on the student.
    assert res.scores.kind == "voxel_count"


def test_forward_pipeline_empty_scene_returns_none():
    cfg, state, _ = small_setup()
    empty = PointCloud(points=np.zeros((0, 4)), frame_id="empty")
    assert forward_pipeline(empty, state, cfg, SMALL_GRID) is None


def test_forward_pipeline_far_scene_returns_none():
    cfg, state, _ = small_setup()
    # All points below the grid origin get discarded.
    far = PointCloud(points=np.full((5, 4), -100.0), frame_id="far")
    assert forward_pipeline(far, state, cfg, SMALL_GRID) is None


def test_twin_network_gives_zero_loss():
    """A student cloned from the teacher with shared projectors matches it."""
    cfg = DistillConfig(mode="local", reweight="uniform", n_select=40,
                        k_neighbors=5, c_out=12, seed=1)
    teacher = make_teacher(TeacherConfig(widths=(8, 16, 16), mode="frozen_random",
                                         seed=2))
    state = build_state(cfg, teacher, (8, 16, 16))
    twin, _ = encoder_from_doc(encoder_to_doc(teacher.params))
    state.student = twin
    state.gamma_s = gamma_from_doc(gamma_to_doc(state.gamma_t))
    cloud = synth_scene(SMALL_SCENE)
    res = forward_pipeline(cloud, state, cfg, SMALL_GRID, bn_mode="eval")
    assert res.loss == 0.0
    assert np.array_equal(res.g_student, res.g_teacher)


@pytest.mark.parametrize("mode,reweight", [
    ("local", "importance"),
    ("local", "uniform"),
    ("feature", "importance"),
])
def test_pipeline_gradients_finite_difference(mode, reweight):
    cfg, state, cloud = small_setup(mode, reweight)
    params = trainable_params(state)
    names = sorted(params)

    def fn():
        res = forward_pipeline(cloud, state, cfg, SMALL_GRID, bn_mode="eval")
        grads = pipeline_backward(state, cfg, res)
        return res.loss, [grads[n] for n in names]

    assert grad_check(fn, [params[n] for n in names], eps=1e-6) < 1e-6


def test_pipeline_gradient_skips_teacher_encoder():
    cfg, state, cloud = small_setup()
    res = forward_pipeline(cloud, state, cfg, SMALL_GRID, bn_mode="eval")
    grads = pipeline_backward(state, cfg, res)
    assert set(grads) == set(trainable_params(state))
    # Teacher projector trains, teacher encoder does not appear at all.
    assert "gamma_t.W" in grads
    assert not any(k.startswith("teacher") for k in grads)


def test_teacher_projector_gradient_is_negated_student_loss_flow():
    cfg, state, cloud = small_setup()
    res = forward_pipeline(cloud, state, cfg, SMALL_GRID, bn_mode="eval")
    # d(loss)/dG_T = -d(loss)/dG_S for the squared distance.
    from pointdistill.graph import graph_conv_backward

    _, gt = graph_conv_backward(state.gamma_t, res.conv_cache_t, -res.d_g_student)
    grads = pipeline_backward(state, cfg, res)
    assert np.array_equal(grads["gamma_t.W"], gt.dW)


def test_train_step_updates_and_counts():
    cfg, state, cloud = small_setup()
    before = copy.deepcopy(trainable_params(state))
    m = train_step([cloud], state, cfg, SMALL_GRID)
    after = trainable_params(state)
    assert m.step == 0 and state.step == 1
    assert math.isfinite(m.loss) and m.loss >= 0
    assert m.n_effective == 40.0
    assert any(not np.array_equal(before[k], after[k]) for k in after)


def test_train_step_skips_empty_scene():
    cfg, state, cloud = small_setup()
    empty = PointCloud(points=np.zeros((0, 4)), frame_id="void")
    m = train_step([empty, cloud], state, cfg, SMALL_GRID)
    assert math.isfinite(m.loss)
    m2 = train_step([empty], state, cfg, SMALL_GRID)
    assert math.isnan(m2.loss)
    assert m2.grad_norm == 0.0


def test_train_step_batch_order_is_fixed():
    cfg, s1, cloud = small_setup()
    _, s2, _ = small_setup()
    other = synth_scene(SceneSpec(n_ground=50, n_clusters=3, points_per_cluster=(8, 12),
                                  cluster_extent=0.4, ground_extent=4.0, n_noise=5,
                                  seed=8))
    m1 = train_step([cloud, other], s1, cfg, SMALL_GRID)
    m2 = train_step([cloud, other], s2, cfg, SMALL_GRID)
    assert m1.loss == m2.loss
    assert np.array_equal(trainable_params(s1)["student.0.W"],
                          trainable_params(s2)["student.0.W"])


def test_train_step_nonfinite_loss_names_scene():
    cfg, state, cloud = small_setup()
    # The shift lands after the last normalization, so it reaches the loss.
    state.gamma_s.bn.beta[:] = np.inf
    with pytest.raises(DistillError, match="synth-7"):
        train_step([cloud], state, cfg, SMALL_GRID)


def make_train_setup(steps=2, frames=2, **kw):
    cfg = DistillConfig(n_select=40, k_neighbors=5, c_out=12, steps=steps,
                        batch=2, seed=3, **kw)
    return TrainSetup(
        scene=SMALL_SCENE,
        grid=SMALL_GRID,
        distill=cfg,
        teacher=TeacherConfig(widths=(8, 16, 16), mode="frozen_random", seed=2),
        student_widths=(8, 10, 10),
        frames=frames,
    )


def test_train_zero_steps_minimal_report(tmp_path):
    result = train(make_train_setup(steps=0), tmp_path)
    assert result.report["steps_run"] == 0
    assert (tmp_path / "metrics.csv").read_text().strip() == \
        "step,loss,grad_norm,phi_entropy,n_effective"
    assert math.isfinite(result.report["loss"]["initial"])
    assert result.report["loss"]["initial"] == result.report["loss"]["final"]


def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    r1 = train(make_train_setup(), tmp_path / "a")
    r2 = train(make_train_setup(), tmp_path / "b")
    for name in ("metrics.csv", "report.json", "teacher.json", "student.json",
                 "gamma_student.json", "gamma_teacher.json"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes(), name
    assert r1.report == r2.report


def test_train_feature_mode_writes_adapter(tmp_path):
    train(make_train_setup(mode="feature"), tmp_path)
    assert (tmp_path / "adapter.json").exists()
    assert not (tmp_path / "gamma_student.json").exists()


def test_proxy_teacher_training_runs(tmp_path):
    setup = make_train_setup()
    setup.teacher = TeacherConfig(widths=(8, 16, 16), mode="proxy_trained", seed=2,
                                  proxy_steps=30)
    result = train(setup, tmp_path)
    import json

    doc = json.loads((tmp_path / "teacher.json").read_text())
    assert doc["provenance"]["mode"] == "proxy_trained"
    assert doc["provenance"]["proxy_loss_last"] < doc["provenance"]["proxy_loss_first"]
    assert math.isfinite(result.report["loss"]["final"])


def test_evaluate_ignores_running_stat_updates():
    cfg, state, cloud = small_setup()
    rm = state.student.layers[0].bn.running_mean.copy()
    evaluate([cloud], state, cfg, SMALL_GRID)
    assert np.array_equal(rm, state.student.layers[0].bn.running_mean)


def test_evaluate_empty_pool_is_nan():
    cfg, state, _ = small_setup()
    empty = PointCloud(points=np.zeros((0, 4)), frame_id="void")
    loss, align = evaluate([empty], state, cfg, SMALL_GRID)
    assert math.isnan(loss) and math.isnan(align)


def test_config_validation_errors():
    with pytest.raises(ValueError):
        DistillConfig(mode="both").validate()
    with pytest.raises(ValueError):
        DistillConfig(tau=0.0).validate()
    with pytest.raises(ValueError):
        DistillConfig(n_select=0).validate()
    with pytest.raises(ValueError):
        DistillConfig(momentum=1.0).validate()


def test_high_tau_reweight_equals_uniform_loss():
    cfg_w, state, cloud = small_setup("local", "importance", tau=1e6)
    res_w = forward_pipeline(cloud, state, cfg_w, SMALL_GRID, bn_mode="eval")
    cfg_u, _, _ = small_setup("local", "uniform")
    res_u = forward_pipeline(cloud, state, cfg_u, SMALL_GRID, bn_mode="eval")
    assert np.isclose(res_w.loss, res_u.loss, rtol=1e-4)
