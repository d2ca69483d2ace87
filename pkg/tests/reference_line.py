"""Hand-written reference model of a failure-free two-machine, one-robot line.

Written separately from the package engine and used as an oracle.  Time is
counted in whole steps.  The buffer is tracked physically (parts waiting
between the machines); the level shown to controllers also counts the part
sitting on machine 2, which is how the package reports it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache


@dataclass(frozen=True)
class RefParams:
    proc: tuple[int, int] = (3, 3)
    handle: int = 2
    travel: int = 2
    cap: int = 3


@dataclass(frozen=True)
class RefState:
    t: int = 0
    part: tuple[int, int] = (0, 0)
    done: tuple[int, int] = (0, 0)  # processing steps completed on the current part
    waiting: int = 0
    robot_at: int = -1  # machine index, -1 when idle
    todo: tuple[str, ...] = ()  # remaining robot jobs: "travel", "unload", "load"
    left: int = 0  # steps left on todo[0]
    made: tuple[int, int] = (0, 0)


def shown_level(p: RefParams, s: RefState) -> int:
    return s.waiting + s.part[1]


def finished(p: RefParams, s: RefState, i: int) -> bool:
    return bool(s.part[i]) and s.done[i] == p.proc[i]


def can_dispatch(p: RefParams, s: RefState, i: int) -> bool:
    if s.robot_at != -1:
        return False
    if s.part[i] and not finished(p, s, i):
        return False
    if i == 0 and shown_level(p, s) >= p.cap:
        return False
    if i == 1 and not s.part[1] and s.waiting < 1:
        return False
    return True


def _set(tup, i, v):
    out = list(tup)
    out[i] = v
    return tuple(out)


def _duration(p: RefParams, job: str) -> int:
    return p.travel if job == "travel" else p.handle


def advance(p: RefParams, s: RefState, request: int | None) -> RefState:
    """One step; ``request`` is a machine for an idle robot, or None to wait."""
    if request is not None and can_dispatch(p, s, request):
        jobs = ("travel",) if p.travel else ()
        jobs += ("unload",) if finished(p, s, request) else ()
        jobs += ("load",)
        s = replace(s, robot_at=request, todo=jobs, left=_duration(p, jobs[0]))

    if s.robot_at != -1:
        i = s.robot_at
        s = replace(s, left=s.left - 1)
        if s.left == 0:
            job, rest = s.todo[0], s.todo[1:]
            if job == "unload":
                s = replace(s, part=_set(s.part, i, 0), done=_set(s.done, i, 0), made=_set(s.made, i, s.made[i] + 1))
                if i == 0:
                    s = replace(s, waiting=s.waiting + 1)
                elif s.waiting < 1:
                    rest = ()  # nothing to reload
            elif job == "load":
                s = replace(s, part=_set(s.part, i, 1), done=_set(s.done, i, 0))
                if i == 1:
                    s = replace(s, waiting=s.waiting - 1)
            if rest:
                s = replace(s, todo=rest, left=_duration(p, rest[0]))
            else:
                s = replace(s, robot_at=-1, todo=(), left=0)

    for i in range(2):
        if s.part[i] and s.done[i] < p.proc[i]:
            s = replace(s, done=_set(s.done, i, s.done[i] + 1))
    return replace(s, t=s.t + 1)


def best_throughput(p: RefParams, horizon: int) -> int:
    """Exhaustive search over every feasible-or-wait choice at each idle step."""

    @lru_cache(maxsize=None)
    def best(s: RefState) -> int:
        if s.t == horizon:
            return s.made[1]
        options = [None]
        if s.robot_at == -1:
            options += [i for i in range(2) if can_dispatch(p, s, i)]
        return max(best(advance(p, s, o)) for o in options)

    return best(RefState())
