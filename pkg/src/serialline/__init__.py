"""Robot-tended serial production line: simulator, dispatch policies, prompt-driven and learned controllers."""

from .heuristics import (
    BaselineController,
    PriorityTable,
    RulePriorityController,
    distribute_to_idle,
    fcfs_decide,
    lpt_decide,
    rule_priority_decide,
    rule_priority_ranking,
    spt_decide,
)
from .model import (
    ConfigError,
    ControllerDecision,
    JointAction,
    LineConfig,
    SystemState,
    decode_state_vector,
    encode_state_vector,
    load_config,
    load_config_file,
)
from .sim import (
    EpisodeTrace,
    InvariantViolation,
    check_invariants,
    env_step,
    feasible_actions,
    reset,
    run_episode,
    step,
)

__all__ = [
    "BaselineController",
    "ConfigError",
    "ControllerDecision",
    "EpisodeTrace",
    "InvariantViolation",
    "JointAction",
    "LineConfig",
    "PriorityTable",
    "RulePriorityController",
    "SystemState",
    "check_invariants",
    "decode_state_vector",
    "distribute_to_idle",
    "encode_state_vector",
    "env_step",
    "fcfs_decide",
    "feasible_actions",
    "load_config",
    "load_config_file",
    "lpt_decide",
    "reset",
    "rule_priority_decide",
    "rule_priority_ranking",
    "run_episode",
    "spt_decide",
    "step",
]
