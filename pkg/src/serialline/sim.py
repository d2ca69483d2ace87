"""Discrete-time engine for robot-tended serial lines.

One call to :func:`step` advances the clock by ``step_minutes``:

1. finished repairs bring machines back up, then machines whose failure
   time has arrived go down;
2. requests from idle robots are checked against :func:`feasible_actions`;
   accepted robots are locked to their machine;
3. busy robots work through travel -> unload -> load;
4. loaded, running machines advance their progress;
5. the clock advances.

The flow-conservation quantities (production differences, boundaries and
the segment function) are kept as invariant checks rather than integrated.
"""

from __future__ import annotations

import csv
import gc
import io
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Protocol

import numpy as np

from .model import (
    IDLE,
    LOAD,
    TRAVEL,
    UNLOAD,
    ControllerDecision,
    JointAction,
    LineConfig,
    SystemState,
    encode_state_vector,
    fresh_state,
)

_EPS = 1e-9


class InvariantViolation(AssertionError):
    pass


class ControllerError(RuntimeError):
    def __init__(self, step: int, cause: BaseException):
        self.step = step
        super().__init__(f"controller failed at step {step}: {cause!r}")


class Controller(Protocol):
    def decide(self, state: SystemState) -> ControllerDecision: ...


@dataclass(slots=True)
class StepEvents:
    loads: list[tuple[int, int]] = field(default_factory=list)
    unloads: list[tuple[int, int]] = field(default_factory=list)
    completions: list[int] = field(default_factory=list)
    failures: list[int] = field(default_factory=list)
    repairs: list[int] = field(default_factory=list)
    rejected_actions: list[tuple[int, int, str]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not any(
            (self.loads, self.unloads, self.completions, self.failures, self.repairs, self.rejected_actions)
        )


@dataclass(slots=True)
class StepRecord:
    clock: int
    action: Optional[JointAction]
    events: StepEvents
    state: SystemState


@dataclass
class EpisodeTrace:
    config: LineConfig
    seed: int
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def throughput(self) -> int:
        return self.steps[-1].state.throughput if self.steps else 0

    def throughput_series(self) -> list[int]:
        return [rec.state.throughput for rec in self.steps]


# -- downtime -----------------------------------------------------------------

@lru_cache(maxsize=65536)
def downtime_cycle(seed: int, machine: int, cycle: int, mtbf: float, mttr: float) -> tuple[float, float]:
    """Up duration and repair duration of one failure cycle.

    Each (seed, machine, cycle) triple owns an independent stream, so the
    schedule does not depend on how often other machines fail.
    """
    rng = np.random.default_rng([seed, machine, cycle])
    up = float(rng.exponential(mtbf))
    down = float(rng.exponential(mttr))
    # exponential draws can round to 0.0
    return max(up, _EPS), max(down, _EPS)


def reset(config: LineConfig, seed: int = 0) -> SystemState:
    state = fresh_state(config, seed)
    if config.failures_enabled:
        for i, m in enumerate(state.machines):
            up, _ = downtime_cycle(seed, i, 0, config.mtbf[i], config.mttr[i])
            m.next_failure_at = up
    return state


def inject_failure(state: SystemState, machine: int, repair_minutes: float) -> SystemState:
    """Return a copy with ``machine`` forced down for ``repair_minutes``."""
    if repair_minutes <= 0:
        raise ValueError("repair_minutes must be positive")
    out = state.copy()
    m = out.machines[machine]
    m.running = 0
    m.repair_remaining = float(repair_minutes)
    return out


# -- conservation-of-flow quantities -------------------------------------------

def segment_xi(u: float, v: float) -> float:
    """Speed selector: unbounded below the boundary, ``v`` on it."""
    if u < 0:
        return math.inf
    if u == 0:
        return v
    raise InvariantViolation(f"segment function called with u={u} > 0: production difference exceeds boundary")


def _check_pair(config: LineConfig, i: int, j: int) -> None:
    m = config.machine_count
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"machine index out of range: ({i}, {j})")
    if i == j:
        raise ValueError("i and j must differ")


def production_difference(state: SystemState, config: LineConfig, i: int, j: int) -> int:
    """X_i - X_j recovered from buffer levels alone."""
    _check_pair(config, i, j)
    b0 = config.initial_buffer
    b = state.buffers
    # machines i..j are separated by buffers min(i,j) .. max(i,j)-1
    if i > j:
        return sum(b0[k] for k in range(j, i)) - sum(b[k] for k in range(j, i))
    return sum(b[k] for k in range(i, j)) - sum(b0[k] for k in range(i, j))


def boundary(config: LineConfig, i: int, j: int) -> int:
    """Largest value the production difference X_i - X_j can reach."""
    _check_pair(config, i, j)
    if i > j:
        return sum(config.initial_buffer[k] for k in range(j, i))
    return sum(config.buffer_capacity[k] - config.initial_buffer[k] for k in range(i, j))


def buffer_level_identity(state: SystemState, config: LineConfig, k: int) -> int:
    """Level of buffer ``k`` implied by the cumulative production counters."""
    if not 0 <= k < config.machine_count - 1:
        raise IndexError(f"buffer index {k} out of range")
    return state.produced[k] - state.produced[k + 1] + config.initial_buffer[k]


def speed_bound(
    state: SystemState,
    config: LineConfig,
    i: int,
    include_downtime: bool = True,
    include_self: bool = True,
) -> float:
    """Upper bound on machine i's production rate (parts per minute).

    ``u_j`` is 1 when a robot is assigned to machine ``j``; ``w_j`` is 1 when
    it is down.  ``include_downtime=False`` ignores ``w``;
    ``include_self=False`` keeps only the terms coupling i to other machines.
    """
    assigned = state.robot_status()

    def gate(j: int) -> float:
        w = 0 if (not include_downtime or state.machines[j].running) else 1
        return assigned[j] * (1 - w)

    best = gate(i) / config.processing_time[i] if include_self else math.inf
    for j in range(config.machine_count):
        if j == i:
            continue
        slack = production_difference(state, config, i, j) - boundary(config, i, j)
        best = min(best, segment_xi(slack, gate(j)) / config.processing_time[j])
    return best


# -- feasibility ---------------------------------------------------------------

def feasible_actions(state: SystemState, config: LineConfig, wip_cap: Optional[int] = None) -> list[bool]:
    """Per-machine flag: may an idle robot be dispatched there now?

    ``wip_cap`` limits how many parts may be inside the line before a fresh
    part is admitted at machine 1.
    """
    last = config.machine_count - 1
    caps, buffers = config.buffer_capacity, state.buffers
    attended = {r.assigned_machine for r in state.robots}
    out = []
    for i, m in enumerate(state.machines):
        if not m.running or i in attended or (m.has_part and m.progress < 1.0):
            out.append(False)
        elif i < last and buffers[i] >= caps[i]:
            out.append(False)
        elif m.has_part:
            out.append(True)
        elif i == 0:
            out.append(wip_cap is None or state.wip() < wip_cap)
        else:
            out.append(buffers[i - 1] >= 1)
    return out


def infeasibility_reason(state: SystemState, config: LineConfig, i: int, wip_cap: Optional[int] = None) -> str:
    m = state.machines[i]
    if not m.running:
        return "machine down"
    if state.robot_status()[i]:
        return "robot already assigned"
    if m.processing:
        return "part in process"
    if i < config.machine_count - 1 and state.buffers[i] >= config.buffer_capacity[i]:
        return "downstream buffer full"
    if not m.has_part:
        if i == 0:
            return "work-in-process cap reached"
        return "upstream buffer empty"
    return "infeasible"


# -- stepping ------------------------------------------------------------------

def step(
    state: SystemState,
    action: JointAction,
    config: LineConfig,
    wip_cap: Optional[int] = None,
) -> tuple[SystemState, StepEvents]:
    """Advance one timestep.  ``state`` is not modified."""
    if len(action.targets) != config.robot_count:
        raise ValueError(f"joint action has {len(action.targets)} entries, expected {config.robot_count}")
    if state.clock >= config.horizon:
        raise ValueError(f"clock {state.clock} already at horizon {config.horizon}")
    s = state.copy()
    ev = StepEvents()
    dt = config.step_minutes
    clock = s.clock
    m_count = config.machine_count
    last = m_count - 1

    # 1. disturbances: repairs finish, then due failures strike
    for i, m in enumerate(s.machines):
        if m.running:
            continue
        m.repair_remaining -= dt
        if m.repair_remaining <= _EPS:
            m.running = 1
            m.repair_remaining = 0.0
            ev.repairs.append(i)
            if config.failures_enabled:
                m.cycles += 1
                up, _ = downtime_cycle(s.seed, i, m.cycles, config.mtbf[i], config.mttr[i])
                m.next_failure_at = clock + up
    if config.failures_enabled:
        for i, m in enumerate(s.machines):
            if m.running and m.next_failure_at is not None and m.next_failure_at <= clock + _EPS:
                _, down = downtime_cycle(s.seed, i, m.cycles, config.mtbf[i], config.mttr[i])
                m.running = 0
                m.repair_remaining = down
                m.next_failure_at = None
                ev.failures.append(i)

    # 2. dispatch idle robots
    idle = [k for k, r in enumerate(s.robots) if r.assigned_machine is None]
    if idle:
        feasible = feasible_actions(s, config, wip_cap)
        for k in idle:
            target = action.targets[k]
            if not 0 <= target < m_count:
                raise ValueError(f"machine index {target} out of range")
            if not feasible[target]:
                # the (0,0) placeholder falls back to idling without complaint
                if target != 0:
                    if s.robot_status()[target]:
                        reason = "duplicate assignment"
                    else:
                        reason = infeasibility_reason(s, config, target, wip_cap)
                    ev.rejected_actions.append((k, target, reason))
                continue
            feasible[target] = False
            robot = s.robots[k]
            robot.assigned_machine = target
            if config.dispatch_time > 0:
                robot.pending_phase = TRAVEL
                robot.busy_remaining = float(config.dispatch_time)
            else:
                _begin_handling(robot, s.machines[target], config)

    # 3. robot handling
    for k, robot in enumerate(s.robots):
        i = robot.assigned_machine
        if i is None:
            continue
        robot.busy_remaining -= dt
        if robot.busy_remaining > _EPS:
            continue
        machine = s.machines[i]
        if robot.pending_phase == TRAVEL:
            _begin_handling(robot, machine, config)
        elif robot.pending_phase == UNLOAD:
            if i < last:
                s.buffers[i] += 1
            if i > 0:
                s.buffers[i - 1] -= 1
            s.produced[i] += 1
            machine.has_part = 0
            machine.progress = 0.0
            ev.unloads.append((k, i))
            if _part_available(s, config, i, wip_cap):
                robot.pending_phase = LOAD
                robot.busy_remaining = float(config.handling_time)
            else:
                _release(robot)
        elif robot.pending_phase == LOAD:
            machine.has_part = 1
            machine.progress = 0.0
            ev.loads.append((k, i))
            _release(robot)

    # 4. processing
    for i, m in enumerate(s.machines):
        if m.has_part and m.running and m.progress < 1.0:
            m.progress += dt / config.processing_time[i]
            if m.progress >= 1.0 - _EPS:
                m.progress = 1.0
                ev.completions.append(i)

    s.clock = clock + dt
    return s, ev


def _begin_handling(robot, machine, config: LineConfig) -> None:
    robot.pending_phase = UNLOAD if machine.finished else LOAD
    robot.busy_remaining = float(config.handling_time)


def _release(robot) -> None:
    robot.assigned_machine = None
    robot.pending_phase = IDLE
    robot.busy_remaining = 0.0


def _part_available(s: SystemState, config: LineConfig, i: int, wip_cap: Optional[int]) -> bool:
    if i == 0:
        return wip_cap is None or s.wip() < wip_cap
    # machine i is empty here, so every part in the slot count is waiting
    return s.buffers[i - 1] >= 1


# -- invariants ----------------------------------------------------------------

def check_invariants(
    state: SystemState,
    config: LineConfig,
    previous: Optional[SystemState] = None,
) -> None:
    """Raise InvariantViolation if any conservation, bound or monotonicity rule fails."""
    m_count = config.machine_count
    for k in range(m_count - 1):
        b = state.buffers[k]
        if not 0 <= b <= config.buffer_capacity[k]:
            raise InvariantViolation(f"t={state.clock}: buffer {k} level {b} outside [0, {config.buffer_capacity[k]}]")
        expected = buffer_level_identity(state, config, k)
        if b != expected:
            raise InvariantViolation(f"t={state.clock}: buffer {k} level {b} != identity {expected}")
    for i in range(m_count):
        for j in range(m_count):
            if i == j:
                continue
            tau = production_difference(state, config, i, j)
            if tau != state.produced[i] - state.produced[j]:
                raise InvariantViolation(f"t={state.clock}: tau[{i},{j}]={tau} disagrees with counters")
            beta = boundary(config, i, j)
            if tau > beta:
                raise InvariantViolation(f"t={state.clock}: tau[{i},{j}]={tau} exceeds boundary {beta}")
    if all(b == 0 for b in config.initial_buffer):
        for i in range(m_count - 1):
            if state.produced[i] < state.produced[i + 1]:
                raise InvariantViolation(f"t={state.clock}: X[{i}] < X[{i + 1}]")
    for i, m in enumerate(state.machines):
        if m.progress > 0 and not m.has_part:
            raise InvariantViolation(f"t={state.clock}: machine {i} has progress without a part")
        if (m.running == 0) != (m.repair_remaining > 0):
            raise InvariantViolation(f"t={state.clock}: machine {i} running flag disagrees with repair clock")
    for k, r in enumerate(state.robots):
        if r.busy_remaining > 0 and r.assigned_machine is None:
            raise InvariantViolation(f"t={state.clock}: robot {k} busy but unassigned")
    if previous is not None:
        for i in range(m_count):
            if state.produced[i] < previous.produced[i]:
                raise InvariantViolation(f"t={state.clock}: X[{i}] decreased")
            # a machine pinned at a boundary by an unattended neighbour cannot release a part
            bound = speed_bound(previous, config, i, include_downtime=False, include_self=False)
            if bound == 0 and state.produced[i] != previous.produced[i]:
                raise InvariantViolation(f"t={state.clock}: machine {i} produced while its speed bound was zero")


# -- environment interface -----------------------------------------------------

def env_step(
    state: SystemState,
    joint_action: JointAction,
    config: LineConfig,
    reward_mode: str = "cumulative",
    wip_cap: Optional[int] = None,
) -> tuple[list[float], list[float], SystemState]:
    """Step and return (observation, per-agent rewards, next state).

    ``reward_mode="cumulative"`` pays the throughput so far to every agent;
    ``"delta"`` pays only this step's increment.
    """
    nxt, _ = step(state, joint_action, config, wip_cap)
    if reward_mode == "cumulative":
        r = float(nxt.throughput)
    elif reward_mode == "delta":
        r = float(nxt.throughput - state.throughput)
    else:
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    return encode_state_vector(nxt, config), [r] * config.robot_count, nxt


def run_episode(
    config: LineConfig,
    controller: Controller,
    seed: int = 0,
    horizon: Optional[int] = None,
    check: bool = False,
) -> EpisodeTrace:
    """Reset, then step ``horizon`` times, asking the controller whenever a robot is idle."""
    if horizon is None:
        horizon = config.horizon
    if horizon != config.horizon:
        config = config.with_changes(horizon=horizon)
    wip_cap = getattr(controller, "wip_cap", None)
    if callable(wip_cap):
        wip_cap = wip_cap(config)
    trace = EpisodeTrace(config=config, seed=seed)
    state = reset(config, seed)
    placeholder = JointAction.idle(config.robot_count)
    with _collector_paused():
        for t in range(horizon):
            action = None
            if state.idle_robots():
                try:
                    decision = controller.decide(state)
                except Exception as exc:
                    raise ControllerError(t, exc) from exc
                action = decision.joint_action
            nxt, events = step(state, action if action is not None else placeholder, config, wip_cap)
            if check:
                check_invariants(nxt, config, state)
            trace.steps.append(StepRecord(state.clock, action, events, nxt))
            state = nxt
    return trace


@contextmanager
def _collector_paused():
    # a trace is a long acyclic chain of small objects; generational passes
    # over it cost about a third of an episode and reclaim nothing
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


# -- export --------------------------------------------------------------------

def trace_columns(config: LineConfig) -> list[str]:
    cols = ["clock"]
    for i in range(config.machine_count):
        n = i + 1
        cols += [f"m{n}_running", f"m{n}_part", f"m{n}_progress"]
    cols += [f"b{k + 1}" for k in range(config.machine_count - 1)]
    cols += [f"robot{k + 1}_machine" for k in range(config.robot_count)]
    cols.append("throughput")
    return cols


def trace_rows(trace: EpisodeTrace) -> list[list]:
    """One row per step: the state after the step, labelled with the step's start clock.

    Robot columns hold the 1-based machine a robot is locked to, 0 when idle.
    """
    rows = []
    for rec in trace.steps:
        s = rec.state
        row: list = [rec.clock]
        for m in s.machines:
            row += [m.running, m.has_part, f"{m.reported_progress:.4f}"]
        row += list(s.buffers)
        row += [0 if r.assigned_machine is None else r.assigned_machine + 1 for r in s.robots]
        row.append(s.throughput)
        rows.append(row)
    return rows


def trace_to_csv(trace: EpisodeTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_columns(trace.config))
    w.writerows(trace_rows(trace))
    return buf.getvalue()
