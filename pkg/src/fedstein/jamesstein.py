"""James-Stein shrinkage of per-channel normalization statistics.

The estimator pulls a vector estimate ``theta_hat`` of ``c`` means toward a
fixed target ``v``::

    theta_js = f * (theta_hat - v) + v,   f = 1 - (c - 2) * sigma2 / ||theta_hat - v||^2

With ``v = 0`` the estimate shrinks toward the origin.  For ``c >= 3`` this
dominates the raw estimate in total squared error; below that the raw
estimate is admissible and is returned untouched.

On the server, :func:`js_adjust_stats` averages the clients' BN means and
variances and shrinks each aggregate with a noise variance estimated from
the spread of the client vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import NormStats, stable_mean

__all__ = [
    "JsConfig",
    "JsReport",
    "js_shrink",
    "estimate_noise_variance",
    "js_adjust_stats",
]

NOISE_MODES = ("cross_client", "cross_channel")


@dataclass(frozen=True)
class JsConfig:
    target: Union[str, Sequence[float]] = "zero"
    clamp: bool = True
    noise_mode: str = "cross_client"
    min_var: float = 1e-8
    min_channels: int = 3
    total_variance: bool = False

    def __post_init__(self):
        if isinstance(self.target, str) and self.target != "zero":
            raise ValueError(f"target must be 'zero' or a vector, got {self.target!r}")
        if not isinstance(self.target, str):
            object.__setattr__(self, "target", tuple(float(t) for t in self.target))
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if not self.min_var > 0:
            raise ValueError("min_var must be positive")
        if self.min_channels < 3:
            raise ValueError("min_channels must be at least 3")

    def target_vector(self, c: int) -> np.ndarray:
        if isinstance(self.target, str):
            return np.zeros(c)
        v = np.asarray(self.target, dtype=np.float64)
        if v.size != c:
            raise DimensionError(f"target has {v.size} entries, estimate has {c}")
        return v


@dataclass(frozen=True)
class JsReport:
    raw_factor: float
    factor: float
    sigma2_used: float
    applied: bool


def js_shrink(theta_hat, sigma2: float, cfg: JsConfig = JsConfig()):
    """Shrink ``theta_hat`` toward the configured target.

    Returns ``(theta_js, report)``.  Estimates with fewer than
    ``cfg.min_channels`` entries, or lying exactly on the target, come back
    unchanged (resp. as the target) with ``report.applied = False``.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64).reshape(-1)
    sigma2 = float(sigma2)
    if not sigma2 >= 0:
        raise NumericError(f"noise variance must be non-negative, got {sigma2}")
    c = theta_hat.size
    if c < cfg.min_channels:
        return theta_hat.copy(), JsReport(1.0, 1.0, sigma2, False)
    v = cfg.target_vector(c)
    dev = theta_hat - v
    norm2 = float(dev @ dev)
    if norm2 == 0.0:
        return v.copy(), JsReport(1.0, 1.0, sigma2, False)
    raw = 1.0 - (c - 2) * sigma2 / norm2
    f = max(raw, 0.0) if cfg.clamp else raw
    return f * dev + v, JsReport(raw, f, sigma2, True)


def estimate_noise_variance(vectors, mode: str = "cross_client") -> float:
    """Noise variance of an aggregated statistic vector.

    ``cross_client``: per-channel sample variance across the K client
    vectors (K - 1 denominator), averaged over channels; 0 for K = 1.
    ``cross_channel``: sample variance across the c entries of the
    client-averaged vector.
    """
    rows = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    if not rows:
        raise ValueError("need at least one client vector")
    c = rows[0].size
    if any(r.size != c for r in rows):
        raise DimensionError(f"client vectors have lengths {[r.size for r in rows]}")
    stacked = np.stack(rows)
    if mode == "cross_client":
        if len(rows) < 2:
            return 0.0
        return float(stacked.var(axis=0, ddof=1).mean())
    if mode == "cross_channel":
        if c < 2:
            return 0.0
        return float(stacked.mean(axis=0).var(ddof=1))
    raise ValueError(f"unknown noise mode {mode!r}")


def js_adjust_stats(client_stats: Sequence[NormStats], cfg: JsConfig = JsConfig(), weights=None):
    """Aggregate client BN statistics and shrink both moments.

    Returns ``(mu_js, var_js, (mean_report, var_report))``.
    """
    if not client_stats:
        raise ValueError("need at least one client")
    c = client_stats[0].c
    if any(s.c != c for s in client_stats):
        raise DimensionError(f"client stats disagree on channel count: {[s.c for s in client_stats]}")
    means = np.stack([s.mean for s in client_stats])
    variances = np.stack([s.var for s in client_stats])
    mu_agg = stable_mean(means, weights)
    var_agg = stable_mean(variances, weights)
    if cfg.total_variance:
        var_agg = var_agg + stable_mean(np.square(means - mu_agg), weights)
    s2_mu = estimate_noise_variance(means, cfg.noise_mode)
    s2_var = estimate_noise_variance(variances, cfg.noise_mode)
    mu_js, rep_mu = js_shrink(mu_agg, s2_mu, cfg)
    var_js, rep_var = js_shrink(var_agg, s2_var, cfg)
    var_js = np.maximum(var_js, cfg.min_var)
    return mu_js, var_js, (rep_mu, rep_var)
