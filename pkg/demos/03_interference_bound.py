"""
One-step interference on quadratics
===================================

For smooth quadratic risks a shared gradient step obeys an exact
inequality. Each task's change splits into its own gradient, the other
tasks' gradients and a curvature term.
"""

import numpy as np

from ssrkit.interference import (BoundSpec, QuadraticTaskFamily, gradient_conflict_matrix,
                                 interference_decomposition, opposing_regression_tasks, regression_loss,
                                 verify_bound_quadratic)

rng = np.random.default_rng(0)
family = QuadraticTaskFamily.random(rng, n_tasks=3, dim=5)
rep = interference_decomposition(rng.standard_normal(5), family)
for i in range(3):
    print(f"task {i}: dR {rep.delta_risk[i]:+.4f}  self {rep.self_term[i]:.4f}  "
          f"cross {rep.cross_term[i]:+.4f}  slack {rep.slack[i]:.2e}")

# %%
print("\nrandom families:", verify_bound_quadratic(BoundSpec(), trials=1000, seed=0).summary())
print("step size 2/L:   ", verify_bound_quadratic(BoundSpec(eta="2/L"), trials=1000, seed=1).summary())
iso = verify_bound_quadratic(BoundSpec(isotropic=True), trials=200, seed=2)
print("isotropic:        max |slack| %.1e (the bound is tight)" % iso.worst_abs_isotropic)

# %%
# Gradient cosines: two regression tasks with negated targets point in opposite directions.
a, b = opposing_regression_tasks(0)
print("\nopposing tasks cosine matrix\n", gradient_conflict_matrix({"w": np.zeros((8, 1))}, [a, b],
                                                                   regression_loss).matrix)
