"""Shrinking a noisy mean vector toward zero beats using it raw once c >= 3.

Draws many noisy observations of a fixed 16-dim mean, shrinks each one,
and compares squared error against the raw observation.  Then shows how
the shrinkage factor reacts to the amount of client disagreement when the
same rule is applied to batch-norm statistics.
"""

import numpy as np

from fedstein import JsConfig, NormStats, js_adjust_stats, js_shrink

rng = np.random.default_rng(0)

print("risk of raw vs shrunk estimate, sigma^2 = 1, c = 16")
for scale in (0.0, 1.0, 2.0, 4.0):
    theta = np.full(16, scale / 4)
    obs = theta + rng.standard_normal((5000, 16))
    shrunk = np.array([js_shrink(x, 1.0)[0] for x in obs])
    raw_mse = np.mean(np.sum((obs - theta) ** 2, axis=1))
    js_mse = np.mean(np.sum((shrunk - theta) ** 2, axis=1))
    print(f"  |theta| = {np.linalg.norm(theta):5.2f}   raw {raw_mse:6.2f}   shrunk {js_mse:6.2f}")

print("\nc = 2 is left alone:", js_shrink([1.0, 2.0], 5.0)[1])

print("\nBN statistics from 4 clients, growing disagreement")
base_mu = np.linspace(-1, 1, 8)
for spread in (0.0, 0.1, 0.5, 2.0):
    stats = [NormStats(base_mu + spread * rng.standard_normal(8), np.ones(8)) for _ in range(4)]
    mu, var, (rep_mu, rep_var) = js_adjust_stats(stats, JsConfig())
    print(f"  spread {spread:4.1f}   mean factor {rep_mu.factor:.3f}   var factor {rep_var.factor:.3f}")
