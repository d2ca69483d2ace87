"""Domain types, configuration loading and the flat state-vector layout.

Machine indices are 0-based everywhere in code.  Prompts, CSV headers and
console reports use 1-based labels ("Machine 1" is index 0).

Buffer ``k`` (0-based) sits between machine ``k`` and machine ``k + 1``.
A part taken by machine ``k + 1`` keeps its slot in buffer ``k`` until that
machine releases it, so a stored buffer level always equals
``X[k] - X[k + 1] + initial_buffer[k]``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, fields, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence, Union

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# robot phases
IDLE = "none"
TRAVEL = "travel"
UNLOAD = "unload"
LOAD = "load"

SOURCES = ("fcfs", "spt", "lpt", "rule_priority", "llm", "marl")


class ConfigError(ValueError):
    """Raised when a configuration document cannot be turned into a LineConfig."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class LineConfig:
    processing_time: tuple[float, ...]
    buffer_capacity: tuple[int, ...]
    robot_count: int = 1
    initial_buffer: Optional[tuple[int, ...]] = None
    handling_time: float = 2.0
    dispatch_time: float = 2.0
    mtbf: Optional[tuple[float, ...]] = None
    mttr: Optional[tuple[float, ...]] = None
    horizon: int = 480
    step_minutes: int = 1
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "processing_time", tuple(float(t) for t in self.processing_time))
        object.__setattr__(self, "buffer_capacity", tuple(int(b) for b in self.buffer_capacity))
        if self.initial_buffer is None:
            object.__setattr__(self, "initial_buffer", (0,) * len(self.buffer_capacity))
        else:
            object.__setattr__(self, "initial_buffer", tuple(int(b) for b in self.initial_buffer))
        for name in ("mtbf", "mttr"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))
        validate_config(self)

    @cached_property
    def machine_count(self) -> int:
        return len(self.processing_time)

    @property
    def failures_enabled(self) -> bool:
        return self.mtbf is not None

    @property
    def state_size(self) -> int:
        return 5 * self.machine_count - 1

    def with_changes(self, **changes) -> "LineConfig":
        return replace(self, **changes)


def validate_config(cfg: LineConfig) -> None:
    m = cfg.machine_count
    if m < 2:
        raise ConfigError("a line needs at least 2 machines", "processing_time")
    if cfg.robot_count < 1:
        raise ConfigError("at least one robot is required", "robot_count")
    if cfg.robot_count >= m:
        raise ConfigError("robot_count must be smaller than the machine count", "robot_count")
    for i, t in enumerate(cfg.processing_time):
        if not (t > 0 and math.isfinite(t)):
            raise ConfigError("processing time must be positive", f"processing_time[{i}]")
    for name in ("buffer_capacity", "initial_buffer"):
        values = getattr(cfg, name)
        if len(values) != m - 1:
            raise ConfigError(f"expected {m - 1} entries, got {len(values)}", name)
    for k, (cap, init) in enumerate(zip(cfg.buffer_capacity, cfg.initial_buffer)):
        if cap <= 0:
            raise ConfigError("buffer capacity must be positive", f"buffer_capacity[{k}]")
        if init < 0:
            raise ConfigError("initial buffer must be non-negative", f"initial_buffer[{k}]")
        if init > cap:
            raise ConfigError("initial buffer exceeds capacity", f"initial_buffer[{k}]")
    if cfg.handling_time <= 0:
        raise ConfigError("handling time must be positive", "handling_time")
    if cfg.dispatch_time < 0:
        raise ConfigError("dispatch time must be non-negative", "dispatch_time")
    if (cfg.mtbf is None) != (cfg.mttr is None):
        raise ConfigError("mtbf and mttr must be given together", "mtbf" if cfg.mtbf is None else "mttr")
    for name in ("mtbf", "mttr"):
        values = getattr(cfg, name)
        if values is None:
            continue
        if len(values) != m:
            raise ConfigError(f"expected {m} entries, got {len(values)}", name)
        for i, v in enumerate(values):
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError("must be positive", f"{name}[{i}]")
    if cfg.horizon < 0:
        raise ConfigError("horizon must be non-negative", "horizon")
    if cfg.step_minutes < 1:
        raise ConfigError("step_minutes must be a positive integer", "step_minutes")
    if cfg.seed < 0:
        raise ConfigError("seed must be unsigned", "seed")


_SCALAR_TYPES = {
    "robot_count": int,
    "handling_time": float,
    "dispatch_time": float,
    "horizon": int,
    "step_minutes": int,
    "seed": int,
    "name": str,
}
_ARRAY_FIELDS = ("processing_time", "buffer_capacity", "initial_buffer", "mtbf", "mttr")
_REQUIRED = ("processing_time", "buffer_capacity")


def load_config(text: str) -> LineConfig:
    """Parse a TOML configuration document into a validated LineConfig.

    ``machine_count`` is optional; when present it must agree with the
    length of ``processing_time``.  ``buffer_capacity`` may be a single
    number, which is broadcast to every buffer.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse failure: {exc}") from exc

    known = set(_SCALAR_TYPES) | set(_ARRAY_FIELDS) | {"machine_count"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}", unknown[0])
    for name in _REQUIRED:
        if name not in doc:
            raise ConfigError("missing mandatory field", name)

    kwargs: dict[str, Any] = {}
    for name, kind in _SCALAR_TYPES.items():
        if name not in doc:
            continue
        value = doc[name]
        if kind is not str and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"expected a number, got {value!r}", name)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"expected an integer, got {value!r}", name)
        kwargs[name] = kind(value)

    m = doc["processing_time"]
    if not isinstance(m, list):
        raise ConfigError("expected a list", "processing_time")
    machines = len(m)
    if "machine_count" in doc and doc["machine_count"] != machines:
        raise ConfigError(
            f"machine_count={doc['machine_count']} but processing_time has {machines} entries",
            "machine_count",
        )
    for name in _ARRAY_FIELDS:
        if name not in doc:
            continue
        value = doc[name]
        if name in ("buffer_capacity", "initial_buffer") and isinstance(value, (int, float)):
            value = [value] * max(machines - 1, 0)
        if not isinstance(value, list):
            raise ConfigError("expected a list", name)
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"expected a number, got {v!r}", f"{name}[{i}]")
        kwargs[name] = tuple(value)
    return LineConfig(**kwargs)


def load_config_file(path: Union[str, Path]) -> LineConfig:
    """Load a config from a path or from a shipped fixture name (``config1``, ``config2``)."""
    p = Path(path)
    if p.suffix != ".toml" and not p.exists():
        name = str(path)
        try:
            text = resources.files("serialline.configs").joinpath(f"{name}.toml").read_text()
        except FileNotFoundError:
            raise ConfigError(f"no such config file or fixture: {path}") from None
        cfg = load_config(text)
    else:
        cfg = load_config(p.read_text())
        name = p.stem
    if not cfg.name:
        cfg = replace(cfg, name=name)
    return cfg


def config_to_toml(cfg: LineConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            lines.append(f"{f.name} = [{', '.join(_fmt_num(v) for v in value)}]")
        elif isinstance(value, str):
            if value:
                lines.append(f'{f.name} = "{value}"')
        else:
            lines.append(f"{f.name} = {_fmt_num(value)}")
    return "\n".join(lines) + "\n"


def _fmt_num(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return repr(v)


@dataclass(slots=True)
class MachineState:
    running: int = 1
    has_part: int = 0
    # internal progress; 1.0 marks a finished part (reported as 0)
    progress: float = 0.0
    repair_remaining: float = 0.0
    next_failure_at: Optional[float] = None
    # completed up/down cycles, indexes the downtime stream
    cycles: int = 0

    @property
    def finished(self) -> bool:
        return self.has_part == 1 and self.progress >= 1.0

    @property
    def processing(self) -> bool:
        return self.has_part == 1 and self.progress < 1.0

    @property
    def reported_progress(self) -> float:
        return 0.0 if self.progress >= 1.0 else self.progress

    def copy(self) -> "MachineState":
        return MachineState(
            self.running, self.has_part, self.progress,
            self.repair_remaining, self.next_failure_at, self.cycles,
        )


@dataclass(slots=True)
class RobotState:
    assigned_machine: Optional[int] = None
    busy_remaining: float = 0.0
    pending_phase: str = IDLE

    @property
    def idle(self) -> bool:
        return self.assigned_machine is None

    def copy(self) -> "RobotState":
        return RobotState(self.assigned_machine, self.busy_remaining, self.pending_phase)


@dataclass(slots=True)
class SystemState:
    clock: int
    machines: list[MachineState]
    buffers: list[int]
    robots: list[RobotState]
    produced: list[int]
    seed: int = 0

    @property
    def throughput(self) -> int:
        return self.produced[-1]

    def copy(self) -> "SystemState":
        return SystemState(
            self.clock,
            [m.copy() for m in self.machines],
            list(self.buffers),
            [r.copy() for r in self.robots],
            list(self.produced),
            self.seed,
        )

    def idle_robots(self) -> list[int]:
        return [k for k, r in enumerate(self.robots) if r.assigned_machine is None]

    def robot_status(self) -> list[int]:
        status = [0] * len(self.machines)
        for r in self.robots:
            if r.assigned_machine is not None:
                status[r.assigned_machine] = 1
        return status

    def wip(self) -> int:
        """Parts inside the line (machine 1 plus every buffer slot)."""
        return self.machines[0].has_part + sum(self.buffers)

    def to_dict(self) -> dict:
        return {
            "clock": self.clock,
            "seed": self.seed,
            "machines": [
                [m.running, m.has_part, m.progress, m.repair_remaining, m.next_failure_at, m.cycles]
                for m in self.machines
            ],
            "buffers": list(self.buffers),
            "robots": [[r.assigned_machine, r.busy_remaining, r.pending_phase] for r in self.robots],
            "produced": list(self.produced),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemState":
        return cls(
            clock=d["clock"],
            machines=[MachineState(*m) for m in d["machines"]],
            buffers=list(d["buffers"]),
            robots=[RobotState(*r) for r in d["robots"]],
            produced=list(d["produced"]),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class JointAction:
    """One ``(0, machine)`` pair per robot.

    The leading zero is a reserved slot carried over from the prompt format;
    ``(0, 0)`` doubles as "machine 1, or idle if machine 1 is not feasible".
    """

    targets: tuple[int, ...]

    @classmethod
    def of(cls, *targets: int) -> "JointAction":
        return cls(tuple(int(t) for t in targets))

    @classmethod
    def idle(cls, robot_count: int) -> "JointAction":
        return cls((0,) * robot_count)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(0, t) for t in self.targets]

    def validate(self, robot_count: int, machine_count: int) -> None:
        if len(self.targets) != robot_count:
            raise ValueError(f"joint action has {len(self.targets)} entries, expected {robot_count}")
        for t in self.targets:
            if not 0 <= t < machine_count:
                raise ValueError(f"machine index {t} out of range 0..{machine_count - 1}")

    def __len__(self) -> int:
        return len(self.targets)

    def __str__(self) -> str:
        return format_actions(self)


def format_actions(action: JointAction) -> str:
    return "[" + ", ".join(f"(0,{t})" for t in action.targets) + "]"


@dataclass
class ControllerDecision:
    joint_action: JointAction
    source: str
    rationale: Optional[str] = None
    fallback_used: bool = False


def fresh_state(config: LineConfig, seed: int = 0) -> SystemState:
    """All machines up and empty, robots idle, buffers at their initial levels."""
    return SystemState(
        clock=0,
        machines=[MachineState() for _ in range(config.machine_count)],
        buffers=list(config.initial_buffer),
        robots=[RobotState() for _ in range(config.robot_count)],
        produced=[0] * config.machine_count,
        seed=seed,
    )


def encode_state_vector(state: SystemState, config: LineConfig) -> list[float]:
    """Flatten a state in prompt order.

    Layout: M running flags, M part flags, M progress values, M-1 buffer
    levels, M per-machine robot flags.  Length ``5M - 1``.
    """
    m = config.machine_count
    if len(state.machines) != m or len(state.buffers) != m - 1 or len(state.robots) != config.robot_count:
        raise ValueError("state dimensions do not match config")
    vec: list[float] = []
    vec.extend(float(x.running) for x in state.machines)
    vec.extend(float(x.has_part) for x in state.machines)
    vec.extend(x.reported_progress for x in state.machines)
    vec.extend(float(b) for b in state.buffers)
    vec.extend(float(s) for s in state.robot_status())
    return vec


@dataclass(frozen=True)
class StateTuple:
    running: tuple[int, ...]
    has_part: tuple[int, ...]
    progress: tuple[float, ...]
    buffers: tuple[int, ...]
    robot_status: tuple[int, ...]


def decode_state_vector(vec: Sequence[float], machine_count: int) -> StateTuple:
    m = machine_count
    if len(vec) != 5 * m - 1:
        raise ValueError(f"vector length {len(vec)} does not match {m} machines")
    return StateTuple(
        running=tuple(int(v) for v in vec[0:m]),
        has_part=tuple(int(v) for v in vec[m:2 * m]),
        progress=tuple(float(v) for v in vec[2 * m:3 * m]),
        buffers=tuple(int(v) for v in vec[3 * m:4 * m - 1]),
        robot_status=tuple(int(v) for v in vec[4 * m - 1:5 * m - 1]),
    )


def state_vector_labels(machine_count: int) -> list[str]:
    m = machine_count
    labels = [f"Machine {i + 1} running status" for i in range(m)]
    labels += [f"Machine {i + 1} mp-status" for i in range(m)]
    labels += [f"Machine {i + 1} progress" for i in range(m)]
    labels += [f"Buffer {k + 1} level" for k in range(m - 1)]
    labels += [f"Machine {i + 1} robot status" for i in range(m)]
    return labels
