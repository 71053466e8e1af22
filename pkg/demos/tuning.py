"""Choose the penalty on a validation trial.

Run with ``python demos/tuning.py``.
"""
import numpy as np

from mlrwl import MethodConfig, grid_tune, simulate

rng = np.random.default_rng(3)
train = simulate(1, 300, rng)
validation = simulate(1, 1500, rng)

grid = [MethodConfig("linear", lam=lam, n_restarts=2) for lam in (0.3, 1.5, 6.0, 30.0)]
best, scores = grid_tune(train, validation, grid, seed=3)
for j, cell in enumerate(grid):
    mark = "  <- chosen" if cell is best else ""
    print(f"lam {cell.lam:>5}: validation value {scores[j]:.3f}{mark}")
