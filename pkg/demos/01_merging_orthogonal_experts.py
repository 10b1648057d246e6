"""
Merging experts without interference
====================================

Two experts whose task vectors live in orthogonal subspaces should merge
into their sum. Plain averaging halves each of them instead.
"""

import numpy as np

from ssrkit.checkpoint import ParameterMap
from ssrkit.merge import MergeConfig, TaskVector, merge_average, merge_tsvm, merge_wudi, wudi_closed_form

base = ParameterMap({"w": np.array([[0.3, -0.2], [0.1, 0.4]])})
taus = [TaskVector({"w": np.diag([1.0, 0.0])}, "e1"), TaskVector({"w": np.diag([0.0, 1.0])}, "e2")]

avg = merge_average([t.apply(base) for t in taus])
wudi, report = merge_wudi(base, taus, MergeConfig(iterations=5000, lr=1e-2))
tsvm = merge_tsvm(base, taus)

print("base\n", base["w"])
for name, m in [("average", avg), ("tsvm", tsvm), ("wudi", wudi)]:
    print(f"\n{name}: merged - base\n", np.round(m["w"] - base["w"], 6))
print("\nwudi objective: start %.3g, end %.3g" % (report.objective_trace["w"][0], report.final_objective))

# %%
# On random task vectors the optimizer lands on the closed-form minimiser.
rng = np.random.default_rng(0)
rand = [rng.standard_normal((6, 6)) for _ in range(3)]
merged, _ = merge_wudi(ParameterMap({"w": np.zeros((6, 6))}), [TaskVector({"w": t}) for t in rand],
                       MergeConfig(iterations=5000, lr=1e-2))
star = wudi_closed_form(rand)
print("\nrelative distance to closed form: %.2e" % (np.linalg.norm(merged["w"] - star) / np.linalg.norm(star)))
