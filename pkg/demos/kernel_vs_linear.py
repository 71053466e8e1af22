"""Linear and Gaussian-kernel rules on the quadratic-effect setting.

Run with ``python demos/kernel_vs_linear.py``.  Takes under a minute.
"""
import numpy as np

from mlrwl import MethodConfig, accuracy, empirical_value, fit_rule, simulate

rng = np.random.default_rng(1)
train = simulate(2, 600, rng)
test = simulate(2, 6000, rng)

for method in (MethodConfig("linear", lam=3.0), MethodConfig("kernel", lam=0.15, bandwidth="auto")):
    rule, diag = fit_rule(train, method, seed=1)
    print(
        f"{method.tag}: value {empirical_value(test, rule):.3f}  accuracy {accuracy(rule, test.X, 2):.3f}  "
        f"iterations {diag.iterations}  restart {diag.restart_index}"
    )
