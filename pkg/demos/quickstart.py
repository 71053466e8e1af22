"""Fit a linear combination rule on a simulated trial and score it.

Run with ``python demos/quickstart.py``.  Takes about ten seconds.
"""
import numpy as np

from mlrwl import FitConfig, accuracy, dc_fit, empirical_value, plugin_weights, simulate
from mlrwl.evaluation import true_value

rng = np.random.default_rng(0)
train = simulate(1, 400, rng)
test = simulate(1, 4000, rng)

# residual weights: outcome minus a treatment-free fit, over the propensity
weights, _, _ = plugin_weights(train, "known")
print(f"{np.mean(weights.w < 0):.0%} of the training weights are negative")

rule, diag = dc_fit(train, weights, FitConfig(lam=2.0, n_restarts=3, rng_seed=0))
print(f"DC iterations {diag.iterations}, chosen restart {diag.restart_index}, descent {diag.descent_ok}")
print("objective trace:", " ".join(f"{v:.1f}" for v in diag.objective_trace))

print(f"matched-mean value on the test trial {empirical_value(test, rule):.3f}")
print(f"noise-free value                     {true_value(rule, test.X, 1):.3f}")
print(f"accuracy (any optimal combination)   {accuracy(rule, test.X, 1):.3f}")
print(f"accuracy (oracle's first choice)     {accuracy(rule, test.X, 1, ties='strict'):.3f}")

print("recommended combinations for the first five test records:")
print(rule.predict(test.X[:5]))
