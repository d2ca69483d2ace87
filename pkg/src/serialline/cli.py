"""Command-line entry point: ``python3 -m serialline <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bench import CONTROLLERS, ControllerBuildError, ExperimentSpec, compare_controllers, export_traces, run_experiment
from .model import ConfigError, load_config_file


def _parts(text: str):
    return None if text.lower() == "none" else int(text)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="config1", help="fixture name (config1, config2) or TOML path")
    p.add_argument("--seed", type=int, default=0, help="base seed; replication k uses seed + k")
    p.add_argument("--horizon", type=int, default=480)
    p.add_argument("--out", help="output directory for summary and trace files")


def _add_controller_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--parts-per-robot", type=_parts, default=1, help="baseline WIP cap per robot, or 'none'")
    p.add_argument("--transcript", help="LLM transcript file (JSONL) to replay")
    p.add_argument("--llm-mode", choices=("replay", "live", "record"), default="replay")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--record-to", help="append LLM exchanges to this transcript file")
    _add_detail(p)
    p.add_argument("--params", help="trained actor-critic parameter file")


def _add_detail(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt-detail", choices=("paper", "full"), default="paper",
                   help="feasibility text for the first action only, or for every action")


def _options(name: str, args) -> dict:
    if name in ("fcfs", "spt", "lpt"):
        return {"parts_per_robot": args.parts_per_robot}
    if name == "llm":
        endpoint = {
            "base_url": args.base_url, "model": args.model, "temperature": args.temperature,
            "timeout": args.timeout, "retries": args.retries,
        }
        return {
            "transcript": args.transcript, "mode": args.llm_mode, "endpoint": endpoint, "record_to": args.record_to,
            "detail": args.prompt_detail,
        }
    if name == "marl":
        return {"params": args.params} if args.params else {}
    return {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serialline", description="Robot-tended serial line experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replicated runs of one controller")
    _add_common(run)
    run.add_argument("--controller", choices=CONTROLLERS, required=True)
    run.add_argument("--reps", type=int, default=25)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--traces", action="store_true", help="also write one trace CSV per replication")
    _add_controller_opts(run)

    cmp_ = sub.add_parser("compare", help="compare several controllers on one configuration")
    _add_common(cmp_)
    cmp_.add_argument("--controllers", default="fcfs,spt,lpt,rule", help="comma separated names")
    cmp_.add_argument("--reps", type=int, default=25)
    _add_controller_opts(cmp_)

    rep = sub.add_parser("replay", help="run one episode from a recorded LLM transcript")
    _add_common(rep)
    rep.add_argument("--transcript", required=True)
    rep.add_argument("--record-to", help="write this run's exchanges to a new transcript file")
    _add_detail(rep)

    tr = sub.add_parser("train", help="train the actor-critic controller")
    tr.add_argument("--config", default="config1")
    tr.add_argument("--episodes", type=int, default=2000)
    tr.add_argument("--gamma", type=float, default=0.95)
    tr.add_argument("--lr-actor", type=float, default=0.05)
    tr.add_argument("--lr-critic", type=float, default=0.05)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--horizon", type=int, default=480)
    tr.add_argument("--reward", choices=("delta", "cumulative"), default="delta")
    tr.add_argument("--mask", action="store_true", help="sample only feasible machines")
    tr.add_argument("--params-out", default="params.txt")
    tr.add_argument("--curve-out", help="learning curve CSV (episode, throughput)")

    chk = sub.add_parser("check", help="conservation and gradient self-checks")
    chk.add_argument("--episodes", type=int, default=200)
    chk.add_argument("--points", type=int, default=100)
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--corrupt-gradient", action="store_true", help="negative control: must fail")
    return parser


def _cmd_run(args) -> int:
    spec = ExperimentSpec(
        args.config, args.controller, _options(args.controller, args), args.reps, args.horizon,
        args.seed, args.out, args.traces, args.workers,
    )
    result = run_experiment(spec)
    sys.stdout.write(result.summary_csv())
    return 0


def _cmd_compare(args) -> int:
    names = [n.strip() for n in args.controllers.split(",") if n.strip()]
    bad = [n for n in names if n not in CONTROLLERS]
    if bad:
        raise _UsageError(f"unknown controller(s): {', '.join(bad)}")
    specs = [ExperimentSpec(args.config, n, _options(n, args), args.reps, args.horizon, args.seed) for n in names]
    table = compare_controllers(specs, args.out)
    sys.stdout.write(table.to_console())
    return 0


def _cmd_replay(args) -> int:
    from .llm import LLMController, ReplayStore
    from .sim import run_episode

    config = load_config_file(args.config).with_changes(horizon=args.horizon)
    ctrl = LLMController(config, mode="replay", store=ReplayStore.load(args.transcript),
                         detail=args.prompt_detail)
    trace = run_episode(config, ctrl, args.seed)
    fallbacks = sum(t.fallback_used for t in ctrl.transcripts)
    print(f"throughput {trace.throughput}  queries {len(ctrl.transcripts)}  fallbacks {fallbacks}")
    if args.out:
        export_traces(trace, args.out)
    if args.record_to:
        ctrl.recorded_store().save(args.record_to)
    return 0


def _cmd_train(args) -> int:
    from .marl import TrainConfig, evaluate, save_params, train

    config = load_config_file(args.config)
    hyper = TrainConfig(
        episodes=args.episodes, gamma=args.gamma, lr_actor=args.lr_actor, lr_critic=args.lr_critic,
        seed=args.seed, reward_mode=args.reward, mask_infeasible=args.mask, horizon=args.horizon,
    )
    result = train(config, hyper)
    save_params(result.params, args.params_out)
    if args.curve_out:
        Path(args.curve_out).write_text(result.curve_csv())
    greedy = evaluate(config.with_changes(horizon=args.horizon), result.params, range(args.seed, args.seed + 5))
    print(f"trained {args.episodes} episodes; greedy throughput {sum(greedy) / len(greedy):.2f}")
    return 0


def _cmd_check(args) -> int:
    from .checks import conservation_suite, gradient_suite

    report = conservation_suite(args.episodes, args.seed)
    print(f"conservation: {report.episodes} episodes, {report.steps} steps, {len(report.violations)} violations")
    for v in report.violations[:10]:
        print(f"  {v}")
    err = gradient_suite(args.points, args.seed, corrupt=args.corrupt_gradient)
    grad_ok = err < 1e-4
    print(f"gradient: max relative error {err:.3e} ({'ok' if grad_ok else 'FAILED'})")
    return 0 if report.ok and grad_ok else 1


class _UsageError(Exception):
    pass


_COMMANDS = {"run": _cmd_run, "compare": _cmd_compare, "replay": _cmd_replay, "train": _cmd_train, "check": _cmd_check}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"serialline: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ControllerBuildError, OSError, ValueError) as exc:
        print(f"serialline: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
