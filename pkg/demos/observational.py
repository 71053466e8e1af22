"""Confounded assignment: estimated versus true propensities.

Run with ``python demos/observational.py``.
"""
import numpy as np

from mlrwl import FitConfig, accuracy, dc_fit, plugin_weights, simulate

rng = np.random.default_rng(2)
train = simulate(1, 600, rng, design="observational")
test = simulate(1, 6000, rng)

for mode in ("known", "estimate"):
    weights, pmodel, _ = plugin_weights(train, mode)
    rule, _ = dc_fit(train, weights, FitConfig(lam=3.0, n_restarts=3))
    extra = "" if pmodel is None else f" (Newton steps {pmodel.iterations}, gradient {pmodel.grad_norm:.1e})"
    print(f"{mode:>8} propensities: accuracy {accuracy(rule, test.X, 1):.3f}{extra}")
