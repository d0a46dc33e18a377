"""Batch, group and layer normalization with hand-written backward passes.

All functions accept either ``(N, C)`` or ``(N, C, H, W)`` inputs; the affine
parameters ``gamma``/``beta`` are always per channel.  Batch norm reduces
over every axis but the channel axis; layer norm reduces over all features
of one sample; group norm reduces over one group of channels (plus spatial
axes) of one sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericError
from .tensor import NormStats

__all__ = [
    "NormStats",
    "NormConfig",
    "NormCache",
    "bn_forward_train",
    "bn_forward_eval",
    "update_running",
    "norm_forward",
    "norm_backward",
    "bn_backward",
]

NORM_KINDS = ("batch", "group", "layer")


@dataclass(frozen=True)
class NormConfig:
    kind: str = "batch"
    eps: float = 1e-5
    momentum: float = 0.1
    groups: int = 1

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}")
        # eps == 0 is allowed for exact hand checks; configs require eps > 0
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if self.groups < 1:
            raise ValueError("groups must be positive")

    def check_channels(self, c: int):
        if self.kind == "group" and c % self.groups:
            raise DimensionError(f"{self.groups} groups do not divide {c} channels")


@dataclass
class NormCache:
    kind: str
    train: bool
    x_hat: np.ndarray
    inv_std: np.ndarray  # broadcastable against the grouped view
    gamma: np.ndarray
    shape: tuple
    groups: int = 1


def _channel_view(p: np.ndarray, ndim: int) -> np.ndarray:
    return p.reshape((1, -1) + (1,) * (ndim - 2))


def _check_affine(x: np.ndarray, gamma, beta):
    if x.ndim not in (2, 4):
        raise DimensionError(f"normalization expects (N, C) or (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if gamma.size != c or beta.size != c:
        raise DimensionError(f"affine params of size {gamma.size}/{beta.size} for {c} channels")
    return gamma, beta


def _bn_axes(x: np.ndarray):
    return (0,) + tuple(range(2, x.ndim))


def _normalize(x, mean, var, eps):
    denom = np.sqrt(var + eps)
    if np.any(denom == 0):
        raise NumericError("zero variance with eps=0")
    return (x - mean) / denom, 1.0 / denom


def bn_forward_train(x, gamma, beta, cfg: NormConfig = NormConfig()):
    """Normalize with the batch's own moments.

    Returns ``(y, batch_stats, cache)``; ``batch_stats`` feeds
    :func:`update_running`.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma, beta = _check_affine(x, gamma, beta)
    if x.shape[0] < 2:
        raise DegenerateBatchError(f"train-mode batch norm needs >= 2 samples, got {x.shape[0]}")
    axes = _bn_axes(x)
    mean = x.mean(axis=axes, keepdims=True)
    var = np.square(x - mean).mean(axis=axes, keepdims=True)
    x_hat, inv_std = _normalize(x, mean, var, cfg.eps)
    y = _channel_view(gamma, x.ndim) * x_hat + _channel_view(beta, x.ndim)
    stats = NormStats(mean.reshape(-1), var.reshape(-1))
    cache = NormCache("batch", True, x_hat, inv_std, gamma, x.shape)
    return y, stats, cache


def bn_forward_eval(x, gamma, beta, running: NormStats, cfg: NormConfig = NormConfig()):
    x = np.asarray(x, dtype=np.float64)
    gamma, beta = _check_affine(x, gamma, beta)
    mean = np.asarray(running.mean, dtype=np.float64)
    var = np.asarray(running.var, dtype=np.float64)
    if mean.size != x.shape[1]:
        raise DimensionError(f"running stats have {mean.size} channels, input has {x.shape[1]}")
    if np.any(var < 0):
        raise NumericError("running variance must be non-negative")
    x_hat, _ = _normalize(x, _channel_view(mean, x.ndim), _channel_view(var, x.ndim), cfg.eps)
    return _channel_view(gamma, x.ndim) * x_hat + _channel_view(beta, x.ndim)


def update_running(running: NormStats, batch: NormStats, rho: float) -> NormStats:
    if running.c != batch.c:
        raise DimensionError(f"running stats have {running.c} channels, batch has {batch.c}")
    return NormStats(
        (1.0 - rho) * running.mean + rho * batch.mean,
        (1.0 - rho) * running.var + rho * batch.var,
    )


def _grouped(x: np.ndarray, kind: str, groups: int) -> np.ndarray:
    n = x.shape[0]
    if kind == "layer":
        return x.reshape(n, 1, -1)
    return x.reshape(n, groups, -1)


def norm_forward(kind: str, x, gamma, beta, cfg: Optional[NormConfig] = None):
    """Per-sample group or layer normalization; no running statistics."""
    if kind not in ("group", "layer"):
        raise ValueError(f"norm_forward handles group/layer, not {kind!r}")
    cfg = cfg or NormConfig(kind=kind)
    x = np.asarray(x, dtype=np.float64)
    gamma, beta = _check_affine(x, gamma, beta)
    groups = cfg.groups if kind == "group" else 1
    if kind == "group":
        NormConfig(kind="group", groups=groups).check_channels(x.shape[1])
    g = _grouped(x, kind, groups)
    mean = g.mean(axis=2, keepdims=True)
    var = np.square(g - mean).mean(axis=2, keepdims=True)
    g_hat, inv_std = _normalize(g, mean, var, cfg.eps)
    x_hat = g_hat.reshape(x.shape)
    y = _channel_view(gamma, x.ndim) * x_hat + _channel_view(beta, x.ndim)
    return y, NormCache(kind, True, x_hat, inv_std, gamma, x.shape, groups)


def norm_backward(cache: NormCache, dy):
    """Gradients ``(dx, dgamma, dbeta)`` for any of the three kinds."""
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.shape:
        raise DimensionError(f"dy shape {dy.shape} does not match forward {cache.shape}")
    ndim = dy.ndim
    axes = _bn_axes(dy)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * cache.x_hat).sum(axis=axes)
    dxhat = dy * _channel_view(cache.gamma, ndim)
    if cache.kind == "batch":
        mean_d = dxhat.mean(axis=axes, keepdims=True)
        mean_dx = (dxhat * cache.x_hat).mean(axis=axes, keepdims=True)
        dx = cache.inv_std * (dxhat - mean_d - cache.x_hat * mean_dx)
    else:
        gd = _grouped(dxhat, cache.kind, cache.groups)
        gx = _grouped(cache.x_hat, cache.kind, cache.groups)
        mean_d = gd.mean(axis=2, keepdims=True)
        mean_dx = (gd * gx).mean(axis=2, keepdims=True)
        dx = (cache.inv_std * (gd - mean_d - gx * mean_dx)).reshape(cache.shape)
    return dx, dgamma, dbeta


def bn_backward(cache: NormCache, dy):
    return norm_backward(cache, dy)
