"""Linear multi-agent actor-critic for robot dispatch.

Each robot is an agent with its own softmax policy over machines; a single
linear critic scores the shared line state.  Learning happens once per
decision epoch (every step at which some robot is idle) using the one-step
advantage ``r + gamma * V(s') - V(s)``.

Parameter file format (``save_params`` / ``load_params``): whitespace
separated text.  The first line is ``agents machines features``, followed by
``agents * machines`` rows of actor weights (agent-major) and one row of
critic weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .model import ControllerDecision, JointAction, LineConfig, SystemState, encode_state_vector
from .sim import env_step, feasible_actions, reset

log = logging.getLogger(__name__)


def feature_size(config: LineConfig) -> int:
    return config.state_size + 1


def featurize(state: SystemState, config: LineConfig) -> np.ndarray:
    vec = np.asarray(encode_state_vector(state, config), dtype=float)
    m = config.machine_count
    lo, hi = 3 * m, 4 * m - 1
    vec[lo:hi] /= np.asarray(config.buffer_capacity, dtype=float)
    return np.append(vec, 1.0)


@dataclass
class PolicyParams:
    theta: np.ndarray  # (agents, machines, features)
    w: np.ndarray  # (features,)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.theta.ndim != 3 or self.w.shape != (self.theta.shape[2],):
            raise ValueError(f"inconsistent shapes {self.theta.shape} and {self.w.shape}")
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.w))):
            raise ValueError("parameters must be finite")

    @classmethod
    def zeros(cls, agents: int, machines: int, features: int) -> "PolicyParams":
        return cls(np.zeros((agents, machines, features)), np.zeros(features))

    @classmethod
    def for_config(cls, config: LineConfig) -> "PolicyParams":
        return cls.zeros(config.robot_count, config.machine_count, feature_size(config))

    @property
    def agents(self) -> int:
        return self.theta.shape[0]

    @property
    def machines(self) -> int:
        return self.theta.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.w.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.w])


def save_params(params: PolicyParams, path: Union[str, Path]) -> None:
    a, m, f = params.theta.shape
    rows = [f"{a} {m} {f}"]
    rows += [" ".join(repr(float(x)) for x in row) for row in params.theta.reshape(a * m, f)]
    rows.append(" ".join(repr(float(x)) for x in params.w))
    Path(path).write_text("\n".join(rows) + "\n")


def load_params(path: Union[str, Path]) -> PolicyParams:
    lines = Path(path).read_text().split("\n")
    try:
        a, m, f = (int(x) for x in lines[0].split())
        body = np.array([[float(x) for x in line.split()] for line in lines[1 : 2 + a * m]])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed parameter file") from exc
    if body.shape != (a * m + 1, f):
        raise ValueError(f"{path}: expected {a * m + 1} rows of {f} values")
    return PolicyParams(body[:-1].reshape(a, m, f), body[-1])


def _softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    z = np.exp(logits - logits.max())
    return z / z.sum()


def policy_probs(params: PolicyParams, features: np.ndarray, agent: int) -> np.ndarray:
    return _softmax(params.theta[agent] @ features)


def value(params: PolicyParams, features: np.ndarray) -> float:
    return float(params.w @ features)


def grad_log_policy(params: PolicyParams, features: np.ndarray, agent: int, action: int) -> np.ndarray:
    """Gradient of ``log pi(action)`` w.r.t. that agent's weight matrix."""
    p = policy_probs(params, features, agent)
    p = -p
    p[action] += 1.0
    return np.outer(p, features)


@dataclass(frozen=True)
class Transition:
    features: np.ndarray
    actions: tuple[int, ...]
    reward: float
    next_features: np.ndarray
    terminal: bool = False
    # agents whose choice was actually taken this epoch; None means all
    active: Optional[tuple[int, ...]] = None


def advantage(params: PolicyParams, tr: Transition, gamma: float) -> float:
    bootstrap = 0.0 if tr.terminal else gamma * value(params, tr.next_features)
    a = tr.reward + bootstrap - value(params, tr.features)
    if not np.isfinite(a):
        raise FloatingPointError("non-finite advantage")
    return a


def ac_update(
    params: PolicyParams,
    tr: Transition,
    gamma: float,
    lr_actor: float,
    lr_critic: float,
) -> PolicyParams:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if lr_actor <= 0 or lr_critic <= 0:
        raise ValueError("learning rates must be positive")
    adv = advantage(params, tr, gamma)
    out = params.copy()
    if adv == 0.0:
        return out
    agents = range(params.agents) if tr.active is None else tr.active
    for i in agents:
        out.theta[i] += lr_actor * adv * grad_log_policy(params, tr.features, i, tr.actions[i])
    out.w += lr_critic * adv * tr.features
    return out


# -- gradient verification -----------------------------------------------------

@dataclass(frozen=True)
class SmallMDP:
    """Enumerable states given directly as feature rows."""

    features: np.ndarray  # (states, features)

    @classmethod
    def random(cls, states: int = 3, features: int = 4, seed: int = 0) -> "SmallMDP":
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(states, features))
        f[:, -1] = 1.0
        return cls(f)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom < 1e-12 else float(np.linalg.norm(a - b) / denom)


def grad_check(params: PolicyParams, mdp: SmallMDP, h: float = 1e-5, corrupt: bool = False) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Covers ``log pi(a|s)`` for every state, agent and action, plus ``V(s)``.
    ``corrupt=True`` flips the analytic sign, as a negative control.
    """
    sign = -1.0 if corrupt else 1.0
    worst = 0.0
    for phi in mdp.features:
        for i in range(params.agents):
            for a in range(params.machines):
                analytic = sign * grad_log_policy(params, phi, i, a)
                numeric = np.zeros_like(analytic)
                for idx in np.ndindex(*analytic.shape):
                    plus, minus = params.copy(), params.copy()
                    plus.theta[i][idx] += h
                    minus.theta[i][idx] -= h
                    lp = np.log(policy_probs(plus, phi, i)[a])
                    lm = np.log(policy_probs(minus, phi, i)[a])
                    numeric[idx] = (lp - lm) / (2 * h)
                worst = max(worst, _rel_err(analytic, numeric))
        analytic_v = sign * phi
        numeric_v = np.zeros_like(phi)
        for k in range(len(phi)):
            plus, minus = params.copy(), params.copy()
            plus.w[k] += h
            minus.w[k] -= h
            numeric_v[k] = (value(plus, phi) - value(minus, phi)) / (2 * h)
        worst = max(worst, _rel_err(analytic_v, numeric_v))
    return worst


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    gamma: float = 0.95
    lr_actor: float = 0.05
    lr_critic: float = 0.05
    seed: int = 0
    reward_mode: str = "delta"
    mask_infeasible: bool = False
    horizon: Optional[int] = None


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list[int] = field(default_factory=list)

    def curve_csv(self) -> str:
        return "episode,throughput\n" + "".join(f"{k},{y}\n" for k, y in enumerate(self.curve))


class DivergenceError(FloatingPointError):
    def __init__(self, episode: int, cause: Exception):
        super().__init__(f"training diverged in episode {episode}: {cause}")
        self.episode = episode


def _choose(
    params: PolicyParams,
    phi: np.ndarray,
    state: SystemState,
    config: LineConfig,
    rng: Optional[np.random.Generator],
    mask: bool,
) -> tuple[list[int], tuple[int, ...]]:
    idle = state.idle_robots()
    feasible = np.array(feasible_actions(state, config)) if mask else None
    targets = [0] * config.robot_count
    for i in idle:
        p = policy_probs(params, phi, i)
        if feasible is not None and feasible.any():
            p = np.where(feasible, p, 0.0)
            p /= p.sum()
        targets[i] = int(rng.choice(len(p), p=p)) if rng is not None else int(np.argmax(p))
    return targets, tuple(idle)


def train(config: LineConfig, hyper: TrainConfig = TrainConfig()) -> TrainResult:
    """Sampled-action training; identical ``hyper`` gives identical results."""
    if config.horizon < 1:
        raise ValueError("horizon must be positive")
    horizon = hyper.horizon or config.horizon
    if horizon != config.horizon:
        config = config.with_changes(horizon=horizon)
    rng = np.random.default_rng(hyper.seed)
    params = PolicyParams.for_config(config)
    result = TrainResult(params)
    idle_action = JointAction.idle(config.robot_count)
    for ep in range(hyper.episodes):
        try:
            state = reset(config, hyper.seed + ep)
            pending = None
            earned = 0.0
            for _ in range(horizon):
                action = idle_action
                if state.idle_robots():
                    phi = featurize(state, config)
                    if pending is not None:
                        tr = Transition(pending[0], pending[1], earned, phi, False, pending[2])
                        params = ac_update(params, tr, hyper.gamma, hyper.lr_actor, hyper.lr_critic)
                    targets, active = _choose(params, phi, state, config, rng, hyper.mask_infeasible)
                    pending, earned = (phi, tuple(targets), active), 0.0
                    action = JointAction(tuple(targets))
                _, rewards, state = env_step(state, action, config, hyper.reward_mode)
                earned += rewards[0]
            if pending is not None:
                tr = Transition(pending[0], pending[1], earned, featurize(state, config), True, pending[2])
                params = ac_update(params, tr, hyper.gamma, hyper.lr_actor, hyper.lr_critic)
        except (ValueError, FloatingPointError) as exc:
            raise DivergenceError(ep, exc) from exc
        result.curve.append(state.throughput)
    result.params = params
    return result


class MarlController:
    """Greedy rollout of trained parameters.

    Like training, the argmax is unmasked by default and the simulator
    rejects infeasible picks; ``mask_infeasible`` restricts it to feasible
    machines instead.
    """

    wip_cap = None

    def __init__(self, config: LineConfig, params: PolicyParams, mask_infeasible: bool = False):
        if params.theta.shape != (config.robot_count, config.machine_count, feature_size(config)):
            raise ValueError("parameters do not match the line configuration")
        self.config = config
        self.params = params
        self.mask_infeasible = mask_infeasible

    def decide(self, state: SystemState) -> ControllerDecision:
        phi = featurize(state, self.config)
        targets, _ = _choose(self.params, phi, state, self.config, None, self.mask_infeasible)
        return ControllerDecision(JointAction(tuple(targets)), "marl")


def bandit_run(updates: int = 500, lr: float = 0.1, seed: int = 0) -> list[float]:
    """One-state two-arm bandit paying 1 for arm 0; returns P(arm 0) after each update."""
    rng = np.random.default_rng(seed)
    params = PolicyParams.zeros(1, 2, 1)
    phi = np.ones(1)
    history = []
    for _ in range(updates):
        a = int(rng.choice(2, p=policy_probs(params, phi, 0)))
        tr = Transition(phi, (a,), 1.0 if a == 0 else 0.0, phi, terminal=True)
        params = ac_update(params, tr, 0.0, lr, lr)
        history.append(float(policy_probs(params, phi, 0)[0]))
    return history


def evaluate(config: LineConfig, params: PolicyParams, seeds: Sequence[int], mask_infeasible: bool = False) -> list[int]:
    from .sim import run_episode

    ctrl = MarlController(config, params, mask_infeasible)
    return [run_episode(config, ctrl, s).throughput for s in seeds]
