"""Teacher and student feature encoders plus checkpoint serialization.

An encoder is a stack of linear -> batch norm -> ReLU layers over per-unit
input features. Teachers are frozen after construction: either random
weights with unit batch-norm stats, or weights fitted on a proxy regression
(predict log(1 + count) per unit) to give the features spatial structure.

Checkpoints are JSON documents; float64 values round-trip exactly through
repr-based JSON floats. See README for the layout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import GammaParams
from .numerics import (
    BatchNormState,
    LinearParams,
    SgdMomentum,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
)

TEACHER_MODES = ("frozen_random", "proxy_trained")


@dataclass
class EncoderLayer:
    linear: LinearParams
    bn: BatchNormState


@dataclass
class EncoderParams:
    layers: list[EncoderLayer]

    @classmethod
    def create(cls, widths, rng: np.random.Generator, bn_mode: str = "train") -> "EncoderParams":
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"EncoderParams: bad widths {widths}")
        layers = [
            EncoderLayer(
                linear=LinearParams.create(w_in, w_out, rng),
                bn=BatchNormState.create(w_out, mode=bn_mode),
            )
            for w_in, w_out in zip(widths[:-1], widths[1:])
        ]
        return cls(layers=layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].linear.in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].linear.out_width

    @property
    def widths(self) -> list[int]:
        return [self.in_width] + [layer.linear.out_width for layer in self.layers]


@dataclass
class EncoderLayerCache:
    X: np.ndarray
    post_bn: np.ndarray
    bn_cache: object


@dataclass
class LayerGrads:
    dW: np.ndarray
    db: np.ndarray
    dgamma: np.ndarray
    dbeta: np.ndarray


def encoder_forward(p: EncoderParams, X: np.ndarray, bn_mode: str | None = None):
    """Run the stack. Returns (features, caches) for the backward pass."""
    h = X
    caches = []
    for layer in p.layers:
        pre = linear_forward(layer.linear, h)
        post, bn_cache = batchnorm_forward(layer.bn, pre, mode=bn_mode)
        caches.append(EncoderLayerCache(X=h, post_bn=post, bn_cache=bn_cache))
        h = relu(post)
    return h, caches


def encoder_backward(p: EncoderParams, caches, dF: np.ndarray):
    """Returns (dX, [LayerGrads per layer, input-to-output order])."""
    if len(caches) != len(p.layers):
        raise ValueError("encoder_backward: cache/layer count mismatch")
    grads: list[LayerGrads | None] = [None] * len(p.layers)
    d = dF
    for idx in range(len(p.layers) - 1, -1, -1):
        layer = p.layers[idx]
        cache = caches[idx]
        dpost = relu_backward(cache.post_bn, d)
        dpre, dgamma, dbeta = batchnorm_backward(layer.bn, cache.bn_cache, dpost)
        d, dW, db = linear_backward(layer.linear, cache.X, dpre)
        grads[idx] = LayerGrads(dW=dW, db=db, dgamma=dgamma, dbeta=dbeta)
    return d, grads


@dataclass
class TeacherConfig:
    widths: tuple[int, ...] = (8, 64, 64)
    mode: str = "frozen_random"
    seed: int = 0
    proxy_steps: int = 300
    proxy_lr: float = 0.05
    proxy_momentum: float = 0.9


@dataclass
class TeacherArtifact:
    """Frozen encoder; arrays are read-only after construction."""

    params: EncoderParams
    provenance: dict


def _layer_arrays(layer: EncoderLayer):
    return (layer.linear.W, layer.linear.b, layer.bn.gamma, layer.bn.beta,
            layer.bn.running_mean, layer.bn.running_var)


def param_hash(params: EncoderParams) -> str:
    """sha256 over shapes and row-major float64 bytes of every array."""
    h = hashlib.sha256()
    for layer in params.layers:
        for arr in _layer_arrays(layer):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def _train_proxy(params: EncoderParams, X: np.ndarray, y: np.ndarray,
                 rng: np.random.Generator, cfg: TeacherConfig) -> tuple[float, float]:
    """Fit the encoder (plus a throwaway scalar head) to y by SGD, full batch."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"proxy targets {y.shape[0]} rows for {X.shape[0]} features")
    head = LinearParams.create(params.out_width, 1, rng)
    opt = SgdMomentum(cfg.proxy_lr, cfg.proxy_momentum)
    tensors = {"head.W": head.W, "head.b": head.b}
    for li, layer in enumerate(params.layers):
        tensors[f"{li}.W"] = layer.linear.W
        tensors[f"{li}.b"] = layer.linear.b
        tensors[f"{li}.gamma"] = layer.bn.gamma
        tensors[f"{li}.beta"] = layer.bn.beta

    first_loss = last_loss = float("nan")
    for step in range(cfg.proxy_steps):
        F, caches = encoder_forward(params, X)
        pred = linear_forward(head, F)[:, 0]
        resid = pred - y
        loss = float(resid @ resid / resid.size)
        if step == 0:
            first_loss = loss
        last_loss = loss
        dpred = (2.0 / resid.size) * resid
        dF, dWh, dbh = linear_backward(head, F, dpred[:, None])
        _, layer_grads = encoder_backward(params, caches, dF)
        grads = {"head.W": dWh, "head.b": dbh}
        for li, g in enumerate(layer_grads):
            grads[f"{li}.W"] = g.dW
            grads[f"{li}.b"] = g.db
            grads[f"{li}.gamma"] = g.dgamma
            grads[f"{li}.beta"] = g.dbeta
        opt.step(tensors, grads)
    return first_loss, last_loss


def make_teacher(cfg: TeacherConfig, proxy_features: np.ndarray | None = None,
                 proxy_targets: np.ndarray | None = None) -> TeacherArtifact:
    """Build and freeze a teacher encoder from a seed.

    frozen_random leaves the random init untouched (eval batch norm with
    unit stats). proxy_trained first fits the stack to the provided
    regression targets, then freezes with the learned running stats.
    """
    if cfg.mode not in TEACHER_MODES:
        raise ValueError(f"make_teacher: mode must be one of {TEACHER_MODES}, got {cfg.mode!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    params = EncoderParams.create(cfg.widths, rng, bn_mode="train")
    provenance = {"mode": cfg.mode, "seed": int(cfg.seed), "steps": 0}
    if cfg.mode == "proxy_trained":
        if proxy_features is None or proxy_targets is None:
            raise ValueError("make_teacher: proxy_trained requires features and targets")
        first, last = _train_proxy(params, np.asarray(proxy_features, dtype=np.float64),
                                   proxy_targets, rng, cfg)
        provenance.update(steps=int(cfg.proxy_steps), proxy_loss_first=first,
                          proxy_loss_last=last)
    for layer in params.layers:
        layer.bn.mode = "eval"
        for arr in _layer_arrays(layer):
            arr.setflags(write=False)
    return TeacherArtifact(params=params, provenance=provenance)


# --- checkpoint documents ---------------------------------------------------


def _linear_to_doc(p: LinearParams) -> dict:
    return {"W": p.W.tolist(), "b": p.b.tolist()}


def _linear_from_doc(doc: dict) -> LinearParams:
    return LinearParams(W=np.asarray(doc["W"], dtype=np.float64),
                        b=np.asarray(doc["b"], dtype=np.float64))


def _bn_to_doc(s: BatchNormState) -> dict:
    return {
        "gamma": s.gamma.tolist(),
        "beta": s.beta.tolist(),
        "running_mean": s.running_mean.tolist(),
        "running_var": s.running_var.tolist(),
        "momentum": s.momentum,
        "eps": s.eps,
        "mode": s.mode,
    }


def _bn_from_doc(doc: dict) -> BatchNormState:
    return BatchNormState(
        gamma=np.asarray(doc["gamma"], dtype=np.float64),
        beta=np.asarray(doc["beta"], dtype=np.float64),
        running_mean=np.asarray(doc["running_mean"], dtype=np.float64),
        running_var=np.asarray(doc["running_var"], dtype=np.float64),
        momentum=float(doc["momentum"]),
        eps=float(doc["eps"]),
        mode=str(doc["mode"]),
    )


def encoder_to_doc(params: EncoderParams, provenance: dict | None = None) -> dict:
    return {
        "kind": "encoder",
        "widths": params.widths,
        "provenance": provenance,
        "layers": [
            {**_linear_to_doc(layer.linear), "bn": _bn_to_doc(layer.bn)}
            for layer in params.layers
        ],
    }


def encoder_from_doc(doc: dict) -> tuple[EncoderParams, dict | None]:
    if doc.get("kind") != "encoder":
        raise ValueError(f"not an encoder checkpoint: kind={doc.get('kind')!r}")
    layers = [
        EncoderLayer(linear=_linear_from_doc(item), bn=_bn_from_doc(item["bn"]))
        for item in doc["layers"]
    ]
    return EncoderParams(layers=layers), doc.get("provenance")


def gamma_to_doc(p: GammaParams) -> dict:
    return {
        "kind": "gamma",
        "owner": p.owner,
        "linear": _linear_to_doc(p.linear),
        "bn": _bn_to_doc(p.bn),
    }


def gamma_from_doc(doc: dict) -> GammaParams:
    if doc.get("kind") != "gamma":
        raise ValueError(f"not a gamma checkpoint: kind={doc.get('kind')!r}")
    return GammaParams(linear=_linear_from_doc(doc["linear"]),
                       bn=_bn_from_doc(doc["bn"]), owner=str(doc.get("owner", "")))


def adapter_to_doc(p: LinearParams) -> dict:
    return {"kind": "linear", **_linear_to_doc(p)}


def adapter_from_doc(doc: dict) -> LinearParams:
    if doc.get("kind") != "linear":
        raise ValueError(f"not a linear checkpoint: kind={doc.get('kind')!r}")
    return _linear_from_doc(doc)


def save_checkpoint(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
