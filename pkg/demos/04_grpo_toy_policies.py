"""
GRPO on toy policies
====================

Group-normalised advantages with a clipped surrogate and no KL term,
on a four-armed bandit and a three-token exact-match task.
"""

import numpy as np

from ssrkit.grpo import GrpoConfig, arm_probabilities, bandit_env, group_advantages, grpo_train, sequence_env

print("advantages of [3, 1, 2]:", np.round(group_advantages([3, 1, 2]), 4))

env = bandit_env()
policy, curve = grpo_train(env.make_policy(0), env, GrpoConfig(steps=500))
print("\nbandit arm probabilities after 500 steps:", np.round(arm_probabilities(policy), 3))

# %%
env = sequence_env()
_, curve = grpo_train(env.make_policy(0), env, GrpoConfig(steps=600))
windows = np.asarray(curve).reshape(-1, 100).mean(axis=1)
print("sequence task, mean reward per 100 steps:", np.round(windows, 3))
print("target:", env.info["targets"][0])
