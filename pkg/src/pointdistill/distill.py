"""Reweighted local-graph feature distillation: loss, pipeline, training loop.

Per scene: voxelize, encode per-voxel features with a frozen teacher and a
trainable student, select the top-N candidates by teacher-side importance,
build one KNN graph shared by both sides, project edges through per-side
trainable projectors, and match the pooled graph features under per-graph
softmax weights phi.

Gradients flow into both projectors (they train jointly with the student and
are useless afterwards) but stop at the frozen teacher encoder features and
at phi, which is always treated as a constant weight vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoders import (
    EncoderParams,
    TeacherArtifact,
    TeacherConfig,
    adapter_to_doc,
    encoder_backward,
    encoder_forward,
    encoder_to_doc,
    gamma_to_doc,
    make_teacher,
    save_checkpoint,
)
from .graph import (
    GammaParams,
    build_edge_features,
    graph_conv_backward,
    graph_conv_forward,
    knn_grid,
)
from .numerics import (
    LinearParams,
    SgdMomentum,
    ShapeMismatchError,
    as_matrix,
    linear_backward,
    linear_forward,
)
from .pointcloud import PointCloud, SceneSpec, frame_seeds, synth_scene
from .sampler import (
    ImportanceScores,
    SelectedSet,
    phi_entropy,
    point_importance,
    reweight_point,
    reweight_voxel,
    top_n_select,
    voxel_importance,
)
from .voxelizer import GridConfig, voxel_input_features, voxelize

MODES = ("local", "feature")
REWEIGHTS = ("importance", "uniform")
IMPORTANCES = ("voxel_count", "channel_max")

METRICS_HEADER = "step,loss,grad_norm,phi_entropy,n_effective"


class DistillError(RuntimeError):
    """Training aborted; message names the offending scene or condition."""


@dataclass
class DistillConfig:
    mode: str = "local"
    reweight: str = "importance"
    importance: str = "voxel_count"
    n_select: int = 1024
    k_neighbors: int = 16
    tau: float = 1.0
    c_out: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 500
    batch: int = 2
    seed: int = 0
    knn_cell: float = 0.0  # 0 = density heuristic

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"DistillConfig: mode must be one of {MODES}, got {self.mode!r}")
        if self.reweight not in REWEIGHTS:
            raise ValueError(
                f"DistillConfig: reweight must be one of {REWEIGHTS}, got {self.reweight!r}"
            )
        if self.importance not in IMPORTANCES:
            raise ValueError(
                f"DistillConfig: importance must be one of {IMPORTANCES}, got {self.importance!r}"
            )
        if self.n_select < 1:
            raise ValueError(f"DistillConfig: n_select must be >= 1, got {self.n_select}")
        if self.k_neighbors < 1:
            raise ValueError(f"DistillConfig: k_neighbors must be >= 1, got {self.k_neighbors}")
        if not self.tau > 0:
            raise ValueError(f"DistillConfig: tau must be positive, got {self.tau}")
        if self.c_out < 1:
            raise ValueError(f"DistillConfig: c_out must be >= 1, got {self.c_out}")
        if self.lr < 0:
            raise ValueError(f"DistillConfig: lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"DistillConfig: momentum outside [0, 1): {self.momentum}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("DistillConfig: steps must be >= 0 and batch >= 1")
        if self.knn_cell < 0:
            raise ValueError(f"DistillConfig: knn_cell must be >= 0, got {self.knn_cell}")


@dataclass
class DistillState:
    """Everything train_step mutates: student, projectors, optimizer, clock.

    The teacher encoder is frozen; only student and projector (or adapter)
    arrays change across steps.
    """

    teacher: TeacherArtifact
    student: EncoderParams
    gamma_s: GammaParams | None
    gamma_t: GammaParams | None
    adapter: LinearParams | None
    optimizer: SgdMomentum
    step: int = 0


def build_state(cfg: DistillConfig, teacher: TeacherArtifact,
                student_widths) -> DistillState:
    cfg.validate()
    student_widths = [int(w) for w in student_widths]
    if student_widths[0] != teacher.params.in_width:
        raise ShapeMismatchError(
            "build_state", f"student input width {teacher.params.in_width}",
            (student_widths[0],),
        )
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    rngs = [np.random.Generator(np.random.PCG64(s)) for s in streams]
    student = EncoderParams.create(student_widths, rngs[0], bn_mode="train")
    gamma_s = gamma_t = adapter = None
    if cfg.mode == "local":
        gamma_s = GammaParams.create(student.out_width, cfg.c_out, rngs[1], owner="student")
        gamma_t = GammaParams.create(teacher.params.out_width, cfg.c_out, rngs[2],
                                     owner="teacher")
    else:
        # Feature mode matches adapter(A_S) against A_T directly, so the
        # adapter output width is pinned to the teacher width.
        adapter = LinearParams.create(student.out_width, teacher.params.out_width, rngs[3])
    return DistillState(
        teacher=teacher,
        student=student,
        gamma_s=gamma_s,
        gamma_t=gamma_t,
        adapter=adapter,
        optimizer=SgdMomentum(cfg.lr, cfg.momentum),
    )


def trainable_params(state: DistillState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for li, layer in enumerate(state.student.layers):
        out[f"student.{li}.W"] = layer.linear.W
        out[f"student.{li}.b"] = layer.linear.b
        out[f"student.{li}.gamma"] = layer.bn.gamma
        out[f"student.{li}.beta"] = layer.bn.beta
    for tag, gp in (("gamma_s", state.gamma_s), ("gamma_t", state.gamma_t)):
        if gp is not None:
            out[f"{tag}.W"] = gp.linear.W
            out[f"{tag}.b"] = gp.linear.b
            out[f"{tag}.gamma"] = gp.bn.gamma
            out[f"{tag}.beta"] = gp.bn.beta
    if state.adapter is not None:
        out["adapter.W"] = state.adapter.W
        out["adapter.b"] = state.adapter.b
    return out


def distill_loss(G_S: np.ndarray, G_T: np.ndarray, phi: np.ndarray):
    """Weighted mean of squared row distances.

    L = (1/N) * sum_i phi[i] * ||G_S[i] - G_T[i]||^2 with phi a probability
    vector. Returns (L, dL/dG_S); G_T and phi receive no gradient.
    """
    G_S = as_matrix(G_S, "distill_loss")
    G_T = as_matrix(G_T, "distill_loss")
    if G_S.shape != G_T.shape:
        raise ShapeMismatchError("distill_loss", f"G_T shape {G_T.shape}", G_S.shape)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    n = G_S.shape[0]
    if phi.shape[0] != n:
        raise ShapeMismatchError("distill_loss", f"({n},) phi", phi.shape)
    if phi.size and phi.min() < 0:
        raise ValueError(f"distill_loss: non-probability phi, min {phi.min()}")
    if abs(phi.sum() - 1.0) > 1e-9:
        raise ValueError(f"distill_loss: non-probability phi, sum {phi.sum()!r}")
    diff = G_S - G_T
    per_graph = (diff * diff).sum(axis=1)
    loss = float((phi * per_graph).sum() / n)
    dG_S = (2.0 / n) * phi[:, None] * diff
    return loss, dG_S


@dataclass
class PipelineResult:
    """Forward intermediates kept for the backward pass and for inspection."""

    grid: object
    features: np.ndarray
    scores: ImportanceScores
    selection: SelectedSet
    counts_sel: np.ndarray
    f_student: np.ndarray
    student_caches: list
    a_student: np.ndarray
    neighbors: np.ndarray
    conv_cache_s: object
    conv_cache_t: object
    g_student: np.ndarray
    g_teacher: np.ndarray
    phi: np.ndarray
    loss: float
    d_g_student: np.ndarray


def forward_pipeline(cloud: PointCloud, state: DistillState, cfg: DistillConfig,
                     grid_cfg: GridConfig, bn_mode: str | None = None
                     ) -> PipelineResult | None:
    """Run one scene through the full chain; None signals an empty scene.

    Teacher and student share the selection indices and the neighbor lists,
    both computed from the teacher side only.
    """
    grid = voxelize(cloud, grid_cfg)
    if grid.n_voxels == 0:
        return None
    X = voxel_input_features(grid, cloud)
    f_teacher, _ = encoder_forward(state.teacher.params, X)
    f_student, student_caches = encoder_forward(state.student, X, bn_mode=bn_mode)

    if cfg.importance == "voxel_count":
        scores = voxel_importance(grid)
    else:
        scores = point_importance(f_teacher)
    sel = top_n_select(scores, grid.knn_coords(), f_teacher, cfg.n_select)
    counts_sel = grid.counts[sel.indices]
    a_student = f_student[sel.indices]

    neighbors = knn_grid(sel.coords, cfg.k_neighbors,
                         cfg.knn_cell if cfg.knn_cell > 0 else None)

    conv_cache_s = conv_cache_t = None
    if cfg.mode == "local":
        e_teacher = build_edge_features(sel.features, neighbors)
        e_student = build_edge_features(a_student, neighbors)
        g_teacher, conv_cache_t = graph_conv_forward(e_teacher, state.gamma_t,
                                                     neighbors, bn_mode=bn_mode)
        g_student, conv_cache_s = graph_conv_forward(e_student, state.gamma_s,
                                                     neighbors, bn_mode=bn_mode)
    else:
        g_teacher = sel.features
        g_student = linear_forward(state.adapter, a_student)

    if cfg.reweight == "uniform":
        phi = np.full(sel.n_effective, 1.0 / sel.n_effective)
    elif cfg.importance == "voxel_count":
        phi = reweight_voxel(counts_sel, cfg.tau)
    else:
        phi = reweight_point(g_teacher, cfg.tau)

    loss, d_g_student = distill_loss(g_student, g_teacher, phi)
    return PipelineResult(
        grid=grid,
        features=X,
        scores=scores,
        selection=sel,
        counts_sel=counts_sel,
        f_student=f_student,
        student_caches=student_caches,
        a_student=a_student,
        neighbors=neighbors,
        conv_cache_s=conv_cache_s,
        conv_cache_t=conv_cache_t,
        g_student=g_student,
        g_teacher=g_teacher,
        phi=phi,
        loss=loss,
        d_g_student=d_g_student,
    )


def pipeline_backward(state: DistillState, cfg: DistillConfig,
                      res: PipelineResult) -> dict[str, np.ndarray]:
    """Gradients for every trainable array, keyed like trainable_params."""
    grads: dict[str, np.ndarray] = {}
    if cfg.mode == "local":
        dA_s, gs = graph_conv_backward(state.gamma_s, res.conv_cache_s, res.d_g_student)
        grads.update({"gamma_s.W": gs.dW, "gamma_s.b": gs.db,
                      "gamma_s.gamma": gs.dgamma, "gamma_s.beta": gs.dbeta})
        # The squared distance is symmetric, so the teacher-side projector
        # sees the negated student gradient; flow stops at the frozen
        # teacher encoder features.
        _, gt = graph_conv_backward(state.gamma_t, res.conv_cache_t, -res.d_g_student)
        grads.update({"gamma_t.W": gt.dW, "gamma_t.b": gt.db,
                      "gamma_t.gamma": gt.dgamma, "gamma_t.beta": gt.dbeta})
    else:
        dA_s, dW, db = linear_backward(state.adapter, res.a_student, res.d_g_student)
        grads.update({"adapter.W": dW, "adapter.b": db})

    dF_s = np.zeros_like(res.f_student)
    dF_s[res.selection.indices] = dA_s
    _, layer_grads = encoder_backward(state.student, res.student_caches, dF_s)
    for li, g in enumerate(layer_grads):
        grads[f"student.{li}.W"] = g.dW
        grads[f"student.{li}.b"] = g.db
        grads[f"student.{li}.gamma"] = g.dgamma
        grads[f"student.{li}.beta"] = g.dbeta
    return grads


@dataclass
class StepMetrics:
    step: int
    loss: float
    grad_norm: float
    phi_entropy: float
    n_effective: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.loss!r},{self.grad_norm!r},"
                f"{self.phi_entropy!r},{self.n_effective!r}")


def train_step(clouds, state: DistillState, cfg: DistillConfig,
               grid_cfg: GridConfig) -> StepMetrics:
    """One SGD step over a batch of scenes, summed in the given scene order.

    Scenes with no occupied voxels are skipped; a batch with nothing left
    records nan loss and applies no update.
    """
    total: dict[str, np.ndarray] | None = None
    losses: list[float] = []
    entropies: list[float] = []
    n_effs: list[int] = []
    for cloud in clouds:
        res = forward_pipeline(cloud, state, cfg, grid_cfg)
        if res is None:
            continue
        if not math.isfinite(res.loss):
            raise DistillError(
                f"non-finite loss {res.loss!r} on scene {cloud.frame_id!r} "
                f"at step {state.step}"
            )
        grads = pipeline_backward(state, cfg, res)
        if total is None:
            total = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                total[k] += v
        losses.append(res.loss)
        entropies.append(phi_entropy(res.phi))
        n_effs.append(res.selection.n_effective)

    if total is None:
        metrics = StepMetrics(step=state.step, loss=float("nan"), grad_norm=0.0,
                              phi_entropy=float("nan"), n_effective=0.0)
        state.step += 1
        return metrics

    n_eval = len(losses)
    for k in total:
        total[k] /= n_eval
    grad_norm = math.sqrt(sum(float((g * g).sum()) for g in total.values()))
    state.optimizer.step(trainable_params(state), total)
    metrics = StepMetrics(
        step=state.step,
        loss=float(np.mean(losses)),
        grad_norm=grad_norm,
        phi_entropy=float(np.mean(entropies)),
        n_effective=float(np.mean(n_effs)),
    )
    state.step += 1
    return metrics


def _mean_row_cosine(G_S: np.ndarray, G_T: np.ndarray) -> float:
    ns = np.linalg.norm(G_S, axis=1)
    nt = np.linalg.norm(G_T, axis=1)
    both_zero = (ns <= 1e-12) & (nt <= 1e-12)
    cos = (G_S * G_T).sum(axis=1) / np.maximum(ns * nt, 1e-300)
    return float(np.where(both_zero, 1.0, cos).mean())


def evaluate(scenes, state: DistillState, cfg: DistillConfig,
             grid_cfg: GridConfig) -> tuple[float, float]:
    """Eval-mode (frozen stats, no updates) mean loss and row alignment."""
    losses = []
    aligns = []
    for cloud in scenes:
        res = forward_pipeline(cloud, state, cfg, grid_cfg, bn_mode="eval")
        if res is None:
            continue
        losses.append(res.loss)
        aligns.append(_mean_row_cosine(res.g_student, res.g_teacher))
    if not losses:
        return float("nan"), float("nan")
    return float(np.mean(losses)), float(np.mean(aligns))


@dataclass
class TrainSetup:
    """Everything a full run needs; the CLI materializes this from RunConfig."""

    scene: SceneSpec
    grid: GridConfig
    distill: DistillConfig
    teacher: TeacherConfig
    student_widths: tuple
    frames: int = 8


@dataclass
class TrainResult:
    report: dict
    state: DistillState
    metrics: list


def build_scene_pool(setup: TrainSetup) -> list[PointCloud]:
    seeds = frame_seeds(setup.distill.seed, setup.frames)
    pool = []
    for i, s in enumerate(seeds):
        cloud = synth_scene(replace(setup.scene, seed=s))
        cloud.frame_id = f"frame_{i:04d}"
        pool.append(cloud)
    return pool


def build_teacher_for(setup: TrainSetup, pool) -> TeacherArtifact:
    """Teacher per setup; proxy regression fits log(1+count) on the first frame."""
    if setup.teacher.mode == "proxy_trained":
        grid0 = voxelize(pool[0], setup.grid)
        if grid0.n_voxels == 0:
            raise DistillError("proxy teacher training needs occupied voxels in frame 0")
        X0 = voxel_input_features(grid0, pool[0])
        y0 = np.log1p(grid0.counts)
        return make_teacher(setup.teacher, X0, y0)
    return make_teacher(setup.teacher)


def train(setup: TrainSetup, out_dir: str | Path | None = None) -> TrainResult:
    """Full distillation run over a deterministic synthetic scene pool.

    Streams metrics to <out_dir>/metrics.csv (flushed every step), then
    writes report.json and checkpoints. out_dir=None keeps everything in
    memory for library callers.
    """
    if setup.frames < 1:
        raise ValueError("train: need at least one frame")
    cfg = setup.distill
    cfg.validate()
    setup.grid.validate()
    pool = build_scene_pool(setup)
    teacher = build_teacher_for(setup, pool)
    state = build_state(cfg, teacher, setup.student_widths)

    loss0, align0 = evaluate(pool, state, cfg, setup.grid)
    metrics: list[StepMetrics] = []

    out_path = Path(out_dir) if out_dir is not None else None
    csv_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_file = (out_path / "metrics.csv").open("w", encoding="utf-8")
        csv_file.write(METRICS_HEADER + "\n")
        csv_file.flush()
    try:
        for step in range(cfg.steps):
            batch = [pool[(step * cfg.batch + j) % len(pool)] for j in range(cfg.batch)]
            m = train_step(batch, state, cfg, setup.grid)
            metrics.append(m)
            if csv_file is not None:
                csv_file.write(m.csv_row() + "\n")
                csv_file.flush()
    finally:
        if csv_file is not None:
            csv_file.close()

    loss_final, align_final = evaluate(pool, state, cfg, setup.grid)

    checkpoints = {}
    if out_path is not None:
        save_checkpoint(out_path / "teacher.json",
                        encoder_to_doc(teacher.params, teacher.provenance))
        save_checkpoint(out_path / "student.json", encoder_to_doc(state.student))
        checkpoints = {"teacher": "teacher.json", "student": "student.json"}
        if state.gamma_s is not None:
            save_checkpoint(out_path / "gamma_student.json", gamma_to_doc(state.gamma_s))
            save_checkpoint(out_path / "gamma_teacher.json", gamma_to_doc(state.gamma_t))
            checkpoints["gamma_student"] = "gamma_student.json"
            checkpoints["gamma_teacher"] = "gamma_teacher.json"
        if state.adapter is not None:
            save_checkpoint(out_path / "adapter.json", adapter_to_doc(state.adapter))
            checkpoints["adapter"] = "adapter.json"

    report = {
        "config": {
            "scene": {
                "n_ground": setup.scene.n_ground,
                "n_clusters": setup.scene.n_clusters,
                "points_per_cluster": list(setup.scene.points_per_cluster),
                "cluster_extent": setup.scene.cluster_extent,
                "ground_extent": setup.scene.ground_extent,
                "n_noise": setup.scene.n_noise,
            },
            "grid": {
                "origin": setup.grid.origin.tolist(),
                "voxel_size": setup.grid.voxel_size.tolist(),
                "bounds": setup.grid.bounds.tolist(),
                "mode": setup.grid.mode,
            },
            "distill": {k: getattr(cfg, k) for k in (
                "mode", "reweight", "importance", "n_select", "k_neighbors", "tau",
                "c_out", "lr", "momentum", "steps", "batch", "seed", "knn_cell")},
            "teacher": {
                "widths": list(setup.teacher.widths),
                "mode": setup.teacher.mode,
                "seed": setup.teacher.seed,
                "proxy_steps": setup.teacher.proxy_steps,
                "proxy_lr": setup.teacher.proxy_lr,
            },
            "student_widths": list(setup.student_widths),
            "frames": setup.frames,
        },
        "loss": {"initial": loss0, "final": loss_final},
        "alignment": {"initial": align0, "final": align_final},
        "steps_run": len(metrics),
        "metrics": [m.csv_row() for m in metrics],
        "checkpoints": checkpoints,
    }
    if out_path is not None:
        (out_path / "report.json").write_text(
            json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
    return TrainResult(report=report, state=state, metrics=metrics)
