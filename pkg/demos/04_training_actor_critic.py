"""
Training the linear actor-critic on config1
===========================================

A few hundred episodes are enough on this line; the full run in the
acceptance suite uses 2000.
"""

# %%
import numpy as np

from serialline import load_config_file
from serialline.checks import gradient_suite
from serialline.marl import TrainConfig, bandit_run, evaluate, train

print("gradient check", gradient_suite(points=10))
print("bandit", bandit_run(updates=500)[::100])

# %%
config = load_config_file("config1")
result = train(config, TrainConfig(episodes=300, seed=0))
curve = np.array(result.curve)
print("mean throughput per 50 episodes", curve.reshape(-1, 50).mean(axis=1))

# %%
print("greedy", evaluate(config, result.params, seeds=range(5)))
