"""Dense float64 kernels with hand-derived backward passes.

Matrices are C-contiguous float64 arrays of shape (rows, cols). Forward ops
are pure functions of their inputs; the one exception is batch norm in train
mode, which also updates the running statistics held in its state object.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shape does not match what the op expects; names both shapes."""

    def __init__(self, op: str, expected: str, got) -> None:
        super().__init__(f"{op}: expected {expected}, got {tuple(got)}")


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(name, "a 2-d array", arr.shape)
    return arr


@dataclass
class LinearParams:
    """Affine map Y = X @ W.T + b with W of shape (out_width, in_width)."""

    W: np.ndarray
    b: np.ndarray

    @classmethod
    def create(cls, in_width: int, out_width: int, rng: np.random.Generator) -> "LinearParams":
        # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both W and b.
        bound = 1.0 / np.sqrt(in_width)
        return cls(
            W=rng.uniform(-bound, bound, size=(out_width, in_width)),
            b=rng.uniform(-bound, bound, size=out_width),
        )

    @property
    def in_width(self) -> int:
        return int(self.W.shape[1])

    @property
    def out_width(self) -> int:
        return int(self.W.shape[0])


def linear_forward(p: LinearParams, X: np.ndarray) -> np.ndarray:
    X = as_matrix(X, "linear_forward")
    if X.shape[1] != p.W.shape[1]:
        raise ShapeMismatchError(
            "linear_forward", f"input (n, {p.W.shape[1]}) compatible with W {p.W.shape}", X.shape
        )
    return X @ p.W.T + p.b


def linear_backward(p: LinearParams, X: np.ndarray, dY: np.ndarray):
    """Gradients for Y = X @ W.T + b. Returns (dX, dW, db)."""
    if dY.shape != (X.shape[0], p.W.shape[0]):
        raise ShapeMismatchError(
            "linear_backward", f"upstream grad {(X.shape[0], p.W.shape[0])}", dY.shape
        )
    dX = dY @ p.W
    dW = dY.T @ X
    db = dY.sum(axis=0)
    return dX, dW, db


@dataclass
class BatchNormState:
    """Per-channel batch norm parameters plus running statistics.

    mode selects between batch statistics ('train', mutates running stats)
    and running statistics ('eval', pure).
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5,
               mode: str = "train") -> "BatchNormState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
            mode=mode,
        )

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(s: BatchNormState, X: np.ndarray, mode: str | None = None):
    """Normalize per channel. Returns (Y, cache) for the backward pass.

    mode overrides s.mode when given; train mode uses biased batch variance
    for normalization and folds an unbiased estimate into the running stats.
    """
    X = as_matrix(X, "batchnorm_forward")
    if X.shape[1] != s.channels:
        raise ShapeMismatchError("batchnorm_forward", f"(n, {s.channels})", X.shape)
    if X.shape[0] == 0:
        raise ValueError("batchnorm_forward: empty batch")
    active = s.mode if mode is None else mode
    if active not in ("train", "eval"):
        raise ValueError(f"batchnorm_forward: unknown mode {active!r}")

    if active == "train":
        n = X.shape[0]
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + s.eps)
        xhat = (X - mean) * inv_std
        m = s.momentum
        s.running_mean[...] = (1.0 - m) * s.running_mean + m * mean
        var_update = var * (n / (n - 1.0)) if n > 1 else var
        s.running_var[...] = (1.0 - m) * s.running_var + m * var_update
    else:
        inv_std = 1.0 / np.sqrt(s.running_var + s.eps)
        xhat = (X - s.running_mean) * inv_std
    Y = s.gamma * xhat + s.beta
    return Y, BatchNormCache(xhat=xhat, inv_std=inv_std, mode=active)


def batchnorm_backward(s: BatchNormState, cache: BatchNormCache, dY: np.ndarray):
    """Returns (dX, dgamma, dbeta) matching the cached forward mode."""
    xhat = cache.xhat
    if dY.shape != xhat.shape:
        raise ShapeMismatchError("batchnorm_backward", f"{xhat.shape}", dY.shape)
    dgamma = (dY * xhat).sum(axis=0)
    dbeta = dY.sum(axis=0)
    dxhat = dY * s.gamma
    if cache.mode == "train":
        n = xhat.shape[0]
        dX = (cache.inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
    else:
        dX = dxhat * cache.inv_std
    return dX, dgamma, dbeta


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(X: np.ndarray, dY: np.ndarray) -> np.ndarray:
    # Subgradient at exactly 0 is taken as 0.
    return dY * (X > 0.0)


def softmax_temp(scores: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over a 1-d score vector, max-shifted for stability."""
    v = np.asarray(scores, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatchError("softmax_temp", "a 1-d vector", v.shape)
    if v.size == 0:
        raise ValueError("softmax_temp: empty score vector")
    if not tau > 0.0:
        raise ValueError(f"softmax_temp: tau must be positive, got {tau}")
    z = v / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def grad_check(fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
               wrt: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    fn takes no arguments, reads the arrays in wrt, and returns
    (scalar loss, gradients aligned with wrt). Arrays are perturbed in
    place and restored. Returns the max relative error
    |a - n| / max(1, |a|, |n|) over every coordinate.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    loss, grads = fn()
    if not np.isfinite(loss):
        raise ValueError(f"grad_check: non-finite forward value {loss}")
    if len(grads) != len(wrt):
        raise ValueError(f"grad_check: {len(grads)} gradients for {len(wrt)} arrays")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]

    worst = 0.0
    for arr, g in zip(wrt, grads):
        if arr.shape != g.shape:
            raise ShapeMismatchError("grad_check", f"gradient {arr.shape}", g.shape)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = fn()
            flat[i] = orig - eps
            down, _ = fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise ValueError("grad_check: non-finite finite-difference value")
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            if err > worst:
                worst = err
    return worst


class SgdMomentum:
    """SGD with classical momentum: v <- mu * v + g; p <- p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.0) -> None:
        if lr < 0.0:
            raise ValueError(f"SgdMomentum: negative learning rate {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"SgdMomentum: momentum {momentum} outside [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if set(params) != set(grads):
            missing = sorted(set(params) ^ set(grads))
            raise ValueError(f"SgdMomentum: param/grad key mismatch: {missing}")
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if p.shape != g.shape:
                raise ShapeMismatchError(f"SgdMomentum[{name}]", f"{p.shape}", g.shape)
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
                self.velocity[name] = v
            v *= self.momentum
            v += g
            p -= self.lr * v
