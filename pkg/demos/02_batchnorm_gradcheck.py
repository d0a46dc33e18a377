"""Backprop through dense/conv/normalization stacks vs central differences."""

import numpy as np

from fedstein import normalization
from fedstein.nn import DEFAULT_GRADCHECK_SPECS, LayerSpec, grad_check

for name, layers, shape in DEFAULT_GRADCHECK_SPECS:
    rep = grad_check(layers, shape, seed=0)
    print(f"{name:12s} max rel. err. {rep.max_rel_err:.2e} over {rep.checked} entries -> {'ok' if rep.passed else 'FAIL'}")

# the check is sharp enough to notice a broken backward pass
real = normalization.bn_backward
normalization.bn_backward = lambda cache, dy: tuple(-g if i == 0 else g for i, g in enumerate(real(cache, dy)))
rep = grad_check([LayerSpec("dense", out=4), LayerSpec("norm"), LayerSpec("dense", out=2)], (3,), seed=0)
normalization.bn_backward = real
print(f"\nsign-flipped BN backward: max rel. err. {rep.max_rel_err:.2e} -> {'ok' if rep.passed else 'caught'}")

x = np.random.default_rng(1).normal(5, 3, (32, 6))
y, batch, _ = normalization.bn_forward_train(x, np.ones(6), np.zeros(6))
print("\ntrain-mode output mean", np.abs(y.mean(0)).max().round(12), "var", y.var(0).round(6))
