"""Command line front end: synth, train, inspect-scores, knn-bench, sweep."""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from ._kernels import ACTIVE_BACKEND
from .distill import (
    DistillError,
    build_scene_pool,
    build_state,
    build_teacher_for,
    forward_pipeline,
    train,
)
from .graph import knn_bruteforce, knn_grid
from .pointcloud import load_point_cloud, write_point_cloud
from .voxelizer import single_point_fraction

SWEEP_AXES = ("K", "N", "tau")


def _worker_cap() -> int:
    raw = os.environ.get("POINTDISTILL_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap < 1:
        cap = os.cpu_count() or 1
    return cap


def _emit_csv(lines: list[str], out_dir: str | None, filename: str) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / filename).write_text(text, encoding="utf-8")


def cmd_synth(values: dict, out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = cfgmod.train_setup(values)
    pool = build_scene_pool(setup)
    for i, cloud in enumerate(pool):
        path = out / f"frame_{i:04d}.bin"
        write_point_cloud(cloud, path)
        print(f"{path.name}: {len(cloud)} points")
    return 0


def cmd_train(values: dict, out_dir: str) -> int:
    setup = cfgmod.train_setup(values)
    result = train(setup, out_dir)
    loss = result.report["loss"]
    align = result.report["alignment"]
    print(f"steps: {result.report['steps_run']}")
    print(f"loss: initial {loss['initial']!r} final {loss['final']!r}")
    print(f"alignment: initial {align['initial']!r} final {align['final']!r}")
    print(f"out: {out_dir}")
    return 0


def cmd_inspect_scores(values: dict, frame_path: str, out_dir: str | None) -> int:
    cloud = load_point_cloud(frame_path)
    setup = cfgmod.train_setup(values)
    cfg = setup.distill
    # Teacher and state are rebuilt exactly as cmd_train builds them, so the
    # dumped scores and phi match what training would see for this frame.
    proxy_pool = build_scene_pool(replace(setup, frames=1))
    teacher = build_teacher_for(setup, proxy_pool)
    state = build_state(cfg, teacher, setup.student_widths)
    res = forward_pipeline(cloud, state, cfg, setup.grid, bn_mode="eval")

    lines = ["id,x,y,z,count,score,selected,phi"]
    if res is None:
        _emit_csv(lines, out_dir, "scores.csv")
        print(f"frame {frame_path}: no occupied voxels", file=sys.stderr)
        return 0
    grid = res.grid
    selected = np.zeros(grid.n_voxels, dtype=bool)
    selected[res.selection.indices] = True
    phi_full = np.zeros(grid.n_voxels)
    phi_full[res.selection.indices] = res.phi
    for cid in range(grid.n_voxels):
        x, y, z = (float(v) for v in grid.centers[cid])
        lines.append(
            f"{cid},{x!r},{y!r},{z!r},{int(grid.counts[cid])},"
            f"{float(res.scores.scores[cid])!r},{int(selected[cid])},"
            f"{float(phi_full[cid])!r}"
        )
    _emit_csv(lines, out_dir, "scores.csv")

    print(
        f"frame {frame_path}: {len(cloud)} points, {grid.n_voxels} occupied, "
        f"{grid.n_discarded} discarded, single-point fraction "
        f"{single_point_fraction(grid):.4f}, selected {res.selection.n_effective}, "
        f"loss {res.loss!r}",
        file=sys.stderr,
    )
    return 0


def cmd_knn_bench(values: dict, out_dir: str | None) -> int:
    sizes = values["bench.sizes"]
    k_req = values["bench.k"]
    seed = values["seed"]

    warm = np.random.Generator(np.random.PCG64(0)).random((256, 3))
    knn_bruteforce(warm, 8)
    knn_grid(warm, 8)

    lines = ["N,K,method,wall_ms,checked"]
    for n in sizes:
        k = min(k_req, n)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, n])))
        pts = rng.random((n, 3)) * 100.0
        t0 = time.perf_counter()
        ids_b = knn_bruteforce(pts, k)
        ms_b = (time.perf_counter() - t0) * 1000.0
        t0 = time.perf_counter()
        ids_g = knn_grid(pts, k)
        ms_g = (time.perf_counter() - t0) * 1000.0
        if not np.array_equal(ids_b, ids_g):
            raise RuntimeError(f"knn-bench: grid and bruteforce disagree at N={n}")
        lines.append(f"{n},{k},bruteforce,{ms_b:.3f},1")
        lines.append(f"{n},{k},grid,{ms_g:.3f},1")
    _emit_csv(lines, out_dir, "knn_bench.csv")
    print(f"backend: {ACTIVE_BACKEND}", file=sys.stderr)
    return 0


def _sweep_values(axis: str, text: str):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise cfgmod.ConfigError("sweep: --values must list at least one value")
    if axis == "tau":
        return [float(p) for p in parts]
    return [int(p, 10) for p in parts]


def _sweep_setup(values: dict, axis: str, value):
    run_values = dict(values)
    key = {"K": "distill.k_neighbors", "N": "distill.n_select", "tau": "distill.tau"}[axis]
    run_values[key] = value
    return cfgmod.train_setup(run_values)


def cmd_sweep(values: dict, axis: str, values_text: str, parallel: bool,
              out_dir: str) -> int:
    sweep_vals = _sweep_values(axis, values_text)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_one(value):
        setup = _sweep_setup(values, axis, value)
        run_dir = out / f"{axis}_{cfgmod._fmt_value(value)}"
        result = train(setup, run_dir)
        return (result.report["loss"]["final"], result.report["alignment"]["final"])

    if parallel:
        workers = min(len(sweep_vals), _worker_cap())
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, sweep_vals))
    else:
        results = [run_one(v) for v in sweep_vals]

    lines = ["value,final_loss,alignment"]
    for value, (loss, align) in zip(sweep_vals, results):
        lines.append(f"{cfgmod._fmt_value(value)},{loss!r},{align!r}")
    _emit_csv(lines, out_dir, "sweep.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    # The shared flags are accepted both before and after the command name;
    # SUPPRESS keeps a subcommand parse from clobbering a value given before it.
    shared = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    shared.add_argument("--config", metavar="PATH", help="key=value config file")
    shared.add_argument("--seed", type=int, help="override the run seed")
    shared.add_argument("--out", metavar="DIR", help="output directory")
    shared.add_argument("--print-defaults", action="store_true",
                        help="print the default config and exit")

    # No set_defaults here: it would rewrite the SUPPRESS default on the
    # shared action objects and let each subparser clobber flags parsed
    # before the command name. Missing attributes are filled in main().
    parser = argparse.ArgumentParser(
        prog="pointdistill",
        description="Point cloud feature distillation trainer and inspector.",
        parents=[shared],
    )
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("synth", parents=[shared],
                   help="write synthetic frames as .bin files")
    sub.add_parser("train", parents=[shared],
                   help="run distillation; writes metrics and checkpoints")
    p_inspect = sub.add_parser("inspect-scores", parents=[shared],
                               help="dump per-voxel importance for one frame")
    p_inspect.add_argument("--frame", required=True, metavar="PATH")
    sub.add_parser("knn-bench", parents=[shared],
                   help="time bruteforce vs grid neighbor search")
    p_sweep = sub.add_parser("sweep", parents=[shared],
                             help="train once per value of one axis")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values for the axis")
    p_sweep.add_argument("--parallel", action="store_true",
                         help="run sweep points in a thread pool")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    seed = getattr(args, "seed", None)
    out_dir = getattr(args, "out", None)
    if getattr(args, "print_defaults", False):
        sys.stdout.write(cfgmod.format_defaults())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("pointdistill: a command is required", file=sys.stderr)
        return 2

    try:
        values = cfgmod.load_config(config_path, seed=seed)
    except FileNotFoundError:
        print(f"pointdistill: config file not found: {config_path}", file=sys.stderr)
        return 2
    except cfgmod.ConfigError as exc:
        print(f"pointdistill: {exc}", file=sys.stderr)
        return 2

    needs_out = args.command in ("synth", "train", "sweep")
    if needs_out and out_dir is None:
        print(f"pointdistill: {args.command} requires --out DIR", file=sys.stderr)
        return 2

    try:
        if args.command == "synth":
            return cmd_synth(values, out_dir)
        if args.command == "train":
            return cmd_train(values, out_dir)
        if args.command == "inspect-scores":
            return cmd_inspect_scores(values, args.frame, out_dir)
        if args.command == "knn-bench":
            return cmd_knn_bench(values, out_dir)
        if args.command == "sweep":
            return cmd_sweep(values, args.axis, args.values, args.parallel, out_dir)
    except FileNotFoundError as exc:
        print(f"pointdistill: {exc}", file=sys.stderr)
        return 1
    except (DistillError, ValueError, RuntimeError) as exc:
        print(f"pointdistill: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
