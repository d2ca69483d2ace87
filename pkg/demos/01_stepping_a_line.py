"""
Stepping a two-machine line by hand
===================================

One robot tends two three-minute machines.  Each dispatch spends two
minutes travelling, then two minutes per unload or load.
"""

# %%
from serialline import JointAction, feasible_actions, load_config_file, reset, step

config = load_config_file("config1")
state = reset(config, seed=0)
print(config.processing_time, config.buffer_capacity, config.robot_count)

# %%
# Ask for machine 1 and watch the load land after travel plus handling.
for _ in range(6):
    print(state.clock, feasible_actions(state, config), [m.has_part for m in state.machines], state.buffers)
    state, events = step(state, JointAction.of(0), config)
    if not events.is_empty():
        print("   ", events)

# %%
# An infeasible request is rejected with a reason and the robot stays idle.
state, events = step(state, JointAction.of(1), config)
print(events.rejected_actions)
