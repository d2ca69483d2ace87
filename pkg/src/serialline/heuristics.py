"""Baseline dispatch rules and the downstream-first priority policy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .model import ControllerDecision, JointAction, LineConfig, SystemState
from .sim import feasible_actions


@dataclass(frozen=True)
class PriorityTable:
    """Machine indices, highest priority first."""

    order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError(f"priority order {self.order} is not a permutation of 0..{len(self.order) - 1}")

    @classmethod
    def downstream_first(cls, machine_count: int) -> "PriorityTable":
        return cls(tuple(range(machine_count - 1, -1, -1)))


def assign_in_order(
    state: SystemState,
    config: LineConfig,
    order: Sequence[int],
    wip_cap: Optional[int] = None,
) -> JointAction:
    """Give idle robots the feasible machines of ``order`` one by one.

    Busy robots keep their slot as a ``(0,0)`` placeholder; the simulator
    ignores requests for robots that are locked.  Robots left over once the
    feasible machines run out also get ``(0,0)``.
    """
    feasible = feasible_actions(state, config, wip_cap)
    candidates = [i for i in order if feasible[i]]
    targets = [0] * config.robot_count
    for k in state.idle_robots():
        if not candidates:
            break
        targets[k] = candidates.pop(0)
    return JointAction(tuple(targets))


def spt_order(config: LineConfig) -> list[int]:
    return sorted(range(config.machine_count), key=lambda i: (config.processing_time[i], i))


def lpt_order(config: LineConfig) -> list[int]:
    return sorted(range(config.machine_count), key=lambda i: (-config.processing_time[i], i))


def fcfs_order(config: LineConfig) -> list[int]:
    return list(range(config.machine_count))


def fcfs_decide(state: SystemState, config: LineConfig, wip_cap: Optional[int] = None) -> ControllerDecision:
    return ControllerDecision(assign_in_order(state, config, fcfs_order(config), wip_cap), "fcfs")


def spt_decide(state: SystemState, config: LineConfig, wip_cap: Optional[int] = None) -> ControllerDecision:
    return ControllerDecision(assign_in_order(state, config, spt_order(config), wip_cap), "spt")


def lpt_decide(state: SystemState, config: LineConfig, wip_cap: Optional[int] = None) -> ControllerDecision:
    return ControllerDecision(assign_in_order(state, config, lpt_order(config), wip_cap), "lpt")


def rule_priority_ranking(
    state: SystemState,
    config: LineConfig,
    priorities: Optional[PriorityTable] = None,
) -> JointAction:
    """Feasible machines best-first, padded with ``(0,0)`` to the robot count.

    This is the list the instruction prompt asks for; it says nothing about
    which robot takes which entry.
    """
    if priorities is None:
        priorities = PriorityTable.downstream_first(config.machine_count)
    if len(priorities.order) != config.machine_count:
        raise ValueError("priority table does not match machine count")
    feasible = feasible_actions(state, config)
    ranked = [i for i in priorities.order if feasible[i]][: config.robot_count]
    return JointAction(tuple(ranked + [0] * (config.robot_count - len(ranked))))


def distribute_to_idle(requests: JointAction, state: SystemState) -> JointAction:
    """Hand ranked requests to idle robots in index order; busy robots get ``(0,0)``."""
    targets = [0] * len(requests.targets)
    for k, machine in zip(state.idle_robots(), requests.targets):
        targets[k] = machine
    return JointAction(tuple(targets))


def rule_priority_decide(
    state: SystemState,
    config: LineConfig,
    priorities: Optional[PriorityTable] = None,
) -> ControllerDecision:
    ranking = rule_priority_ranking(state, config, priorities)
    return ControllerDecision(distribute_to_idle(ranking, state), "rule_priority")


_BASELINES: dict[str, Callable[[LineConfig], list[int]]] = {
    "fcfs": fcfs_order,
    "spt": spt_order,
    "lpt": lpt_order,
}


class BaselineController:
    """FCFS / SPT / LPT dispatcher.

    ``parts_per_robot`` caps the parts allowed inside the line at
    ``parts_per_robot * robot_count``: with the default of 1 a part is carried
    all the way through before the next one is released.  ``None`` removes
    the cap, leaving a plain priority rule over feasible machines.
    """

    def __init__(self, name: str, config: LineConfig, parts_per_robot: Optional[int] = 1):
        if name not in _BASELINES:
            raise ValueError(f"unknown baseline {name!r}")
        if parts_per_robot is not None and parts_per_robot < 1:
            raise ValueError("parts_per_robot must be >= 1 or None")
        self.name = name
        self.config = config
        self.parts_per_robot = parts_per_robot
        self.order = _BASELINES[name](config)

    @property
    def wip_cap(self) -> Optional[int]:
        if self.parts_per_robot is None:
            return None
        return self.parts_per_robot * self.config.robot_count

    def decide(self, state: SystemState) -> ControllerDecision:
        return ControllerDecision(assign_in_order(state, self.config, self.order, self.wip_cap), self.name)


class RulePriorityController:
    wip_cap = None

    def __init__(self, config: LineConfig, priorities: Optional[PriorityTable] = None):
        self.config = config
        self.priorities = priorities or PriorityTable.downstream_first(config.machine_count)
        if len(self.priorities.order) != config.machine_count:
            raise ValueError(f"priority order {self.priorities.order} does not cover {config.machine_count} machines")

    def decide(self, state: SystemState) -> ControllerDecision:
        return rule_priority_decide(state, self.config, self.priorities)
