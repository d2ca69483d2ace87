"""Self-check suites: randomized conservation checks and gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import JointAction, LineConfig, SystemState
from .sim import InvariantViolation, check_invariants, reset, step


def random_config(rng: np.random.Generator, horizon: int = 120) -> LineConfig:
    """A valid line with 2-5 machines; failures are switched on about half the time."""
    m = int(rng.integers(2, 6))
    caps = [int(c) for c in rng.integers(1, 5, size=m - 1)]
    failures = bool(rng.random() < 0.5)
    return LineConfig(
        processing_time=[float(t) for t in rng.choice([1, 1.5, 2, 3, 4, 5, 6], size=m)],
        buffer_capacity=caps,
        robot_count=int(rng.integers(1, m)),
        initial_buffer=[int(rng.integers(0, c + 1)) for c in caps],
        handling_time=float(rng.choice([1, 2, 3])),
        dispatch_time=float(rng.choice([0, 1, 2])),
        mtbf=[float(x) for x in rng.uniform(15, 150, size=m)] if failures else None,
        mttr=[float(x) for x in rng.uniform(2, 30, size=m)] if failures else None,
        horizon=horizon,
    )


class RandomActions:
    """Uniform random machine per robot; many picks are infeasible on purpose."""

    def __init__(self, config: LineConfig, rng: np.random.Generator, wip_cap: Optional[int] = None):
        self.config = config
        self.rng = rng
        self.wip_cap = wip_cap

    def sample(self, state: SystemState) -> JointAction:
        picks = self.rng.integers(0, self.config.machine_count, size=self.config.robot_count)
        return JointAction(tuple(int(x) for x in picks))


@dataclass
class SuiteReport:
    episodes: int = 0
    steps: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def conservation_suite(episodes: int = 1000, seed: int = 0, horizon: int = 120) -> SuiteReport:
    """Random configs, seeds and actions, with every invariant checked after every step."""
    rng = np.random.default_rng(seed)
    report = SuiteReport()
    for ep in range(episodes):
        config = random_config(rng, horizon)
        wip_cap = int(rng.integers(1, 4)) if rng.random() < 0.3 else None
        ctrl = RandomActions(config, rng, wip_cap)
        state = reset(config, int(rng.integers(0, 2**31)))
        try:
            check_invariants(state, config)
            for _ in range(config.horizon):
                nxt, _ = step(state, ctrl.sample(state), config, wip_cap)
                check_invariants(nxt, config, state)
                report.steps += 1
                state = nxt
        except InvariantViolation as exc:
            report.violations.append(f"episode {ep} clock {state.clock}: {exc}")
        report.episodes += 1
    return report


def gradient_suite(points: int = 100, seed: int = 0, corrupt: bool = False) -> float:
    """Worst gradient-check error over ``points`` random parameter draws on small problems."""
    from .marl import PolicyParams, SmallMDP, grad_check

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(points):
        agents, machines, features = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
        params = PolicyParams(rng.normal(size=(agents, machines, features)), rng.normal(size=features))
        mdp = SmallMDP.random(3, features, seed=seed * 1000 + k)
        worst = max(worst, grad_check(params, mdp, corrupt=corrupt))
    return worst
