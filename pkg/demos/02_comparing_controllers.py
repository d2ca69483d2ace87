"""
Comparing dispatching controllers
=================================

Twenty-five seeded replications per controller on both shipped lines.
"""

# %%
from serialline.bench import ExperimentSpec, compare_controllers

for line in ("config1", "config2"):
    specs = [ExperimentSpec(line, name) for name in ("fcfs", "spt", "lpt", "rule")]
    print(line)
    print(compare_controllers(specs).to_console())

# %%
# Lifting the one-part-per-robot cap turns the baselines into plain
# priority rules over feasible machines.
specs = [
    ExperimentSpec("config1", "fcfs", {"parts_per_robot": None}, label="fcfs-uncapped"),
    ExperimentSpec("config1", "rule"),
]
print(compare_controllers(specs).to_console())
