"""Flat key=value run configuration shared by every CLI command.

One namespace, no nesting in the file format: dots in key names are only a
reading aid. Unknown keys, duplicates, and unparsable values are hard errors
that name the offending line.
"""

from __future__ import annotations

from pathlib import Path

from .distill import IMPORTANCES, MODES, REWEIGHTS, DistillConfig, TrainSetup
from .encoders import TEACHER_MODES, TeacherConfig
from .pointcloud import SceneSpec
from .voxelizer import GridConfig


class ConfigError(ValueError):
    pass


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_vec3(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated numbers, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_int_list(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected at least one integer")
    return tuple(int(p, 10) for p in parts)


def _fmt_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _Key:
    def __init__(self, default, parse, choices=None):
        self.default = default
        self.parse = parse
        self.choices = choices

    def convert(self, text: str):
        value = self.parse(text)
        if self.choices is not None and value not in self.choices:
            raise ValueError(f"must be one of {', '.join(self.choices)}")
        return value


def _choice(default: str, choices) -> _Key:
    return _Key(default, lambda s: s.strip(), choices=tuple(choices))


KEYS: dict[str, _Key] = {
    "seed": _Key(0, _parse_int),
    "frames": _Key(8, _parse_int),
    "scene.n_ground": _Key(4000, _parse_int),
    "scene.n_clusters": _Key(12, _parse_int),
    "scene.points_per_cluster_min": _Key(80, _parse_int),
    "scene.points_per_cluster_max": _Key(150, _parse_int),
    "scene.cluster_extent": _Key(0.5, _parse_float),
    "scene.ground_extent": _Key(40.0, _parse_float),
    "scene.n_noise": _Key(400, _parse_int),
    "grid.mode": _choice("voxel", ("voxel", "pillar")),
    "grid.origin": _Key((-40.0, -40.0, -3.0), _parse_vec3),
    "grid.voxel_size": _Key((0.5, 0.5, 0.5), _parse_vec3),
    "grid.bounds": _Key((40.0, 40.0, 3.0), _parse_vec3),
    "encoder.teacher_channels": _Key(64, _parse_int),
    "encoder.student_channels": _Key(16, _parse_int),
    "encoder.depth": _Key(2, _parse_int),
    "encoder.teacher_mode": _choice("proxy_trained", TEACHER_MODES),
    "encoder.proxy_steps": _Key(300, _parse_int),
    "encoder.proxy_lr": _Key(0.05, _parse_float),
    "encoder.proxy_momentum": _Key(0.9, _parse_float),
    "distill.mode": _choice("local", MODES),
    "distill.reweight": _choice("importance", REWEIGHTS),
    "distill.importance": _choice("voxel_count", IMPORTANCES),
    "distill.n_select": _Key(1024, _parse_int),
    "distill.k_neighbors": _Key(16, _parse_int),
    "distill.tau": _Key(1.0, _parse_float),
    "distill.c_out": _Key(64, _parse_int),
    "distill.lr": _Key(0.01, _parse_float),
    "distill.momentum": _Key(0.9, _parse_float),
    "distill.steps": _Key(500, _parse_int),
    "distill.batch": _Key(2, _parse_int),
    "knn.cell_size": _Key(0.0, _parse_float),
    "bench.sizes": _Key((1000, 10000, 100000), _parse_int_list),
    "bench.k": _Key(16, _parse_int),
}


def default_values() -> dict:
    return {name: key.default for name, key in KEYS.items()}


def format_defaults() -> str:
    """The defaults as a parseable config file (round-trips exactly)."""
    lines = ["# pointdistill run configuration (defaults)"]
    lines += [f"{name} = {_fmt_value(key.default)}" for name, key in KEYS.items()]
    return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> dict:
    """Overlay file contents onto the defaults."""
    values = default_values()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        name, _, payload = line.partition("=")
        name = name.strip()
        payload = payload.strip()
        if name not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {name!r}")
        if name in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {name!r}")
        seen.add(name)
        try:
            values[name] = KEYS[name].convert(payload)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {name!r}: {exc}") from exc
    return values


def load_config(path: str | Path | None = None, seed: int | None = None) -> dict:
    if path is None:
        values = default_values()
    else:
        p = Path(path)
        values = parse_config(p.read_text(encoding="utf-8"), source=str(p))
    if seed is not None:
        values["seed"] = int(seed)
    return values


def scene_spec(values: dict) -> SceneSpec:
    return SceneSpec(
        n_ground=values["scene.n_ground"],
        n_clusters=values["scene.n_clusters"],
        points_per_cluster=(
            values["scene.points_per_cluster_min"],
            values["scene.points_per_cluster_max"],
        ),
        cluster_extent=values["scene.cluster_extent"],
        ground_extent=values["scene.ground_extent"],
        n_noise=values["scene.n_noise"],
        seed=values["seed"],
    )


def grid_config(values: dict) -> GridConfig:
    return GridConfig(
        origin=values["grid.origin"],
        voxel_size=values["grid.voxel_size"],
        bounds=values["grid.bounds"],
        mode=values["grid.mode"],
    )


def distill_config(values: dict) -> DistillConfig:
    return DistillConfig(
        mode=values["distill.mode"],
        reweight=values["distill.reweight"],
        importance=values["distill.importance"],
        n_select=values["distill.n_select"],
        k_neighbors=values["distill.k_neighbors"],
        tau=values["distill.tau"],
        c_out=values["distill.c_out"],
        lr=values["distill.lr"],
        momentum=values["distill.momentum"],
        steps=values["distill.steps"],
        batch=values["distill.batch"],
        seed=values["seed"],
        knn_cell=values["knn.cell_size"],
    )


def _widths(values: dict, channels: int) -> tuple:
    from .voxelizer import VOXEL_FEATURE_DIM

    depth = values["encoder.depth"]
    if depth < 1:
        raise ConfigError("encoder.depth must be >= 1")
    return (VOXEL_FEATURE_DIM,) + (channels,) * depth


def teacher_config(values: dict) -> TeacherConfig:
    return TeacherConfig(
        widths=_widths(values, values["encoder.teacher_channels"]),
        mode=values["encoder.teacher_mode"],
        seed=values["seed"],
        proxy_steps=values["encoder.proxy_steps"],
        proxy_lr=values["encoder.proxy_lr"],
        proxy_momentum=values["encoder.proxy_momentum"],
    )


def student_widths(values: dict) -> tuple:
    return _widths(values, values["encoder.student_channels"])


def train_setup(values: dict) -> TrainSetup:
    return TrainSetup(
        scene=scene_spec(values),
        grid=grid_config(values),
        distill=distill_config(values),
        teacher=teacher_config(values),
        student_widths=student_widths(values),
        frames=values["frames"],
    )
