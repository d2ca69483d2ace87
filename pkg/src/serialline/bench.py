"""Replicated experiments, controller comparison and trace export."""

from __future__ import annotations

import csv
import io
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from .heuristics import BaselineController, PriorityTable, RulePriorityController
from .model import LineConfig, load_config_file
from .sim import EpisodeTrace, run_episode, trace_to_csv

CONTROLLERS = ("fcfs", "spt", "lpt", "rule", "llm", "marl")


class ControllerBuildError(ValueError):
    pass


def make_controller(name: str, config: LineConfig, options: Optional[Mapping[str, Any]] = None):
    """Build a controller by name.

    Options by controller:

    * ``fcfs``/``spt``/``lpt``: ``parts_per_robot`` (int or None, default 1)
    * ``rule``: ``priorities`` (machine indices, best first)
    * ``llm``: ``transcript`` (replay file), ``mode``, ``endpoint`` (dict of
      endpoint fields), ``detail``, ``record_to`` (transcript file to append to)
    * ``marl``: ``params`` (parameter file), ``mask_infeasible``
    """
    opts = dict(options or {})
    if name == "rule_priority":
        name = "rule"
    if name not in _OPTION_KEYS:
        raise ControllerBuildError(f"unknown controller {name!r}; choose from {', '.join(CONTROLLERS)}")
    unknown = set(opts) - _OPTION_KEYS[name]
    if unknown:
        raise ControllerBuildError(f"unknown options for {name!r}: {sorted(unknown)}")
    try:
        if name == "rule":
            pri = opts.get("priorities")
            return RulePriorityController(config, PriorityTable(tuple(pri)) if pri is not None else None)
        if name == "llm":
            from .llm import EndpointConfig, LLMController, ReplayStore

            path = opts.get("transcript")
            return LLMController(
                config,
                mode=opts.get("mode", "replay"),
                store=ReplayStore.load(path) if path else ReplayStore(),
                endpoint=EndpointConfig(**opts.get("endpoint", {})),
                detail=opts.get("detail", "paper"),
                record_to=opts.get("record_to"),
            )
        if name == "marl":
            from .marl import MarlController, load_params

            if "params" not in opts:
                raise ValueError("a 'params' file is required")
            return MarlController(config, load_params(opts["params"]), opts.get("mask_infeasible", False))
        return BaselineController(name, config, opts.get("parts_per_robot", 1))
    except (OSError, ValueError, TypeError) as exc:
        raise ControllerBuildError(f"cannot build controller {name!r}: {exc}") from exc


_OPTION_KEYS = {
    "fcfs": {"parts_per_robot"},
    "spt": {"parts_per_robot"},
    "lpt": {"parts_per_robot"},
    "rule": {"priorities"},
    "llm": {"transcript", "mode", "endpoint", "detail", "record_to"},
    "marl": {"params", "mask_infeasible"},
}


def resolve_config(ref: Union[str, Path, LineConfig]) -> LineConfig:
    return ref if isinstance(ref, LineConfig) else load_config_file(ref)


@dataclass(frozen=True)
class ExperimentSpec:
    config: Union[str, LineConfig]
    controller: str
    options: Mapping[str, Any] = field(default_factory=dict)
    replications: int = 25
    horizon: int = 480
    base_seed: int = 0
    output_dir: Optional[str] = None
    write_traces: bool = False
    workers: int = 1
    label: Optional[str] = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def name(self) -> str:
        return self.label or self.controller


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    throughputs: list[int]
    mean: float
    std: float
    degenerate: bool
    episode_seconds: list[float]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "mean", "std", "reps", "horizon", "base_seed", "degenerate"])
        w.writerow(
            [self.spec.name, repr(self.mean), repr(self.std), len(self.throughputs),
             self.spec.horizon, self.spec.base_seed, int(self.degenerate)]
        )
        return buf.getvalue()

    def throughputs_text(self) -> str:
        return "".join(f"{y}\n" for y in self.throughputs)


def summarize(values: Sequence[float]) -> tuple[float, float, bool]:
    """Mean, sample standard deviation and a flag for single-sample runs."""
    if not values:
        raise ValueError("no values to summarize")
    mean = statistics.fmean(values)
    if len(values) == 1:
        return mean, 0.0, True
    return mean, statistics.stdev(values), False


def _replicate(args) -> tuple[int, float, Optional[str]]:
    spec, config, seed = args
    ctrl = make_controller(spec.controller, config, spec.options)
    started = time.perf_counter()
    trace = run_episode(config, ctrl, seed)
    elapsed = time.perf_counter() - started
    return trace.throughput, elapsed, trace_to_csv(trace) if spec.write_traces else None


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    config = resolve_config(spec.config).with_changes(horizon=spec.horizon)
    make_controller(spec.controller, config, spec.options)  # fail fast
    out = None
    if spec.output_dir is not None:
        out = Path(spec.output_dir)
        out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, config, spec.base_seed + k) for k in range(spec.replications)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_replicate, jobs))
    else:
        outcomes = [_replicate(j) for j in jobs]
    ys = [o[0] for o in outcomes]
    mean, std, degenerate = summarize(ys)
    result = ExperimentResult(spec, ys, mean, std, degenerate, [o[1] for o in outcomes])
    if out is not None:
        (out / "summary.csv").write_text(result.summary_csv())
        (out / "throughputs.txt").write_text(result.throughputs_text())
        if spec.write_traces:
            for k, o in enumerate(outcomes):
                (out / f"trace_{spec.base_seed + k}.csv").write_text(o[2])
    return result


@dataclass
class Comparison:
    results: list[ExperimentResult]

    def rows(self) -> list[tuple[str, float, float, int]]:
        return [(r.spec.name, r.mean, r.std, len(r.throughputs)) for r in self.results]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "mean", "std", "reps"])
        for name, mean, std, n in self.rows():
            w.writerow([name, repr(mean), repr(std), n])
        return buf.getvalue()

    def to_console(self) -> str:
        rows = [(n, f"{m:.2f}", f"{s:.2f}", str(k)) for n, m, s, k in self.rows()]
        head = ("controller", "mean", "std", "reps")
        widths = [max(len(r[c]) for r in rows + [head]) for c in range(4)]

        def fmt(r):
            return "  ".join(r[0].ljust(widths[0]) if c == 0 else r[c].rjust(widths[c]) for c in range(4))

        lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"


def compare_controllers(specs: Sequence[ExperimentSpec], output_dir: Optional[str] = None) -> Comparison:
    """Run each experiment; rows keep the order they were given in."""
    if len(specs) < 2:
        raise ValueError("comparison needs >= 2 experiment specs")
    configs = [resolve_config(s.config).with_changes(horizon=s.horizon) for s in specs]
    if any(c != configs[0] for c in configs[1:]):
        raise ValueError("all specs in a comparison must share one configuration")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate controller labels in comparison: {names}")
    comparison = Comparison([run_experiment(s) for s in specs])
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(comparison.to_csv())
    return comparison


def export_traces(trace: EpisodeTrace, out_dir: Union[str, Path], prefix: str = "") -> list[Path]:
    """Write actions, buffer levels and events as CSV files.

    ``actions.csv`` has one row per step: the requested action index per
    robot (``-1`` when the controller was not asked) and the machine each
    robot is attached to after the step (1-based, 0 for none).
    """
    if not trace.steps:
        raise ValueError("cannot export an empty trace")
    cfg = trace.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    r, m = cfg.robot_count, cfg.machine_count

    def write(name: str, header: list[str], rows: list[list]) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        path = out / f"{prefix}{name}"
        path.write_text(buf.getvalue())
        return path

    actions, buffers, events = [], [], []
    for t, rec in enumerate(trace.steps):
        req = list(rec.action.targets) if rec.action is not None else [-1] * r
        held = [(rb.assigned_machine + 1) if rb.assigned_machine is not None else 0 for rb in rec.state.robots]
        actions.append([t] + req + held)
        buffers.append([t] + list(rec.state.buffers))
        ev = rec.events
        events += [[t, "failure", "", i + 1, ""] for i in ev.failures]
        events += [[t, "repair", "", i + 1, ""] for i in ev.repairs]
        events += [[t, "unload", k + 1, i + 1, ""] for k, i in ev.unloads]
        events += [[t, "load", k + 1, i + 1, ""] for k, i in ev.loads]
        events += [[t, "completion", "", i + 1, ""] for i in ev.completions]
        events += [[t, "rejected", k + 1, i + 1, why] for k, i, why in ev.rejected_actions]
    return [
        write(
            "actions.csv",
            ["step"] + [f"robot{k + 1}_request" for k in range(r)] + [f"robot{k + 1}_machine" for k in range(r)],
            actions,
        ),
        write("buffers.csv", ["step"] + [f"b{k + 1}" for k in range(m - 1)], buffers),
        write("events.csv", ["step", "event", "robot", "machine", "detail"], events),
    ]
