"""Prompt construction, reply parsing, chat-completions transport and transcript replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import httpx

from .heuristics import PriorityTable, RulePriorityController, distribute_to_idle
from .model import ControllerDecision, JointAction, LineConfig, SystemState, encode_state_vector

log = logging.getLogger(__name__)

SECTIONS = (
    "system_dynamics",
    "parameter_definitions",
    "real_time_state",
    "possible_actions",
    "feasibility_criteria",
    "action_prioritization",
    "output_structure",
    "task_objective",
)

SECTION_TITLES = {
    "system_dynamics": "System dynamics",
    "parameter_definitions": "Parameter definitions",
    "real_time_state": "Real-time state",
    "possible_actions": "Possible actions",
    "feasibility_criteria": "Feasibility criteria",
    "action_prioritization": "Action prioritization",
    "output_structure": "Output structure",
    "task_objective": "Task objective",
}

_NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]


def _word(n: int) -> str:
    return _NUMBER_WORDS[n] if 0 <= n < len(_NUMBER_WORDS) else str(n)


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:g}"


@dataclass(frozen=True)
class PromptBundle:
    system_dynamics: str
    parameter_definitions: str
    real_time_state: str
    possible_actions: str
    feasibility_criteria: str
    action_prioritization: str
    output_structure: str
    task_objective: str

    def __post_init__(self):
        for name in SECTIONS:
            if not getattr(self, name).strip():
                raise ValueError(f"prompt section {name!r} is empty")

    def sections(self) -> dict[str, str]:
        return {name: getattr(self, name) for name in SECTIONS}

    def render(self) -> str:
        return "\n\n".join(f"{SECTION_TITLES[n]}:\n{getattr(self, n)}" for n in SECTIONS)


# -- prompt templates ----------------------------------------------------------

def _system_dynamics(cfg: LineConfig) -> str:
    m = cfg.machine_count
    caps = cfg.buffer_capacity
    n_buf = m - 1
    if n_buf == 1:
        buffers = f"one in-between buffer with a maximum capacity of {caps[0]} parts"
    elif len(set(caps)) == 1:
        buffers = f"{_word(n_buf)} in-between buffers, each with a maximum capacity of {caps[0]} parts"
    else:
        listed = ", ".join(str(c) for c in caps[:-1]) + f" and {caps[-1]}"
        buffers = f"{_word(n_buf)} in-between buffers with maximum capacities of {listed} parts respectively"
    text = f"Consider a serial manufacturing system with {_word(m)} machines (Machines 1–{m}) and {buffers}. "

    times = cfg.processing_time
    slow = max(times)
    slowest = [i + 1 for i, t in enumerate(times) if t == slow]
    if len(slowest) == m:
        text += f"All machines have the same processing time of {_num(slow)} minutes. "
    elif len(slowest) == 1:
        text += (
            f"Each machine has dedicated processing time, with Machine {slowest[0]} being the slowest "
            "(it takes longer to process a part than the others). "
        )
    else:
        names = ", ".join(str(i) for i in slowest[:-1]) + f" and {slowest[-1]}"
        text += (
            f"Each machine has dedicated processing time, with Machines {names} being the slowest "
            "(they take longer to process a part than the others). "
        )
    r = cfg.robot_count
    if r == 1:
        text += "One robot is in the system to handle materials."
    else:
        text += f"{_word(r).capitalize()} robots are in the system to handle materials."
    return text


_PARAMETER_DEFINITIONS = (
    '"running status" indicates if a machine is up or down: 0 = down, 1 = up;\n'
    '"mp-status" indicates if a machine is loaded with a part: 0 = machine has no part, 1 = machine has a part;\n'
    '"progress" indicates if a machine is processing/has processed a part: 0 = either part processing is '
    "completed or no part on the machine at all, 0 < value < 1 = part being processed;\n"
    '"robot status" indicates if a robot is assigned to a machine: 0 = not assigned, 1 = assigned.'
)


def _real_time_state(cfg: LineConfig, values: Optional[list[str]]) -> str:
    m = cfg.machine_count
    labels = (
        [f"Machine {i + 1} running status" for i in range(m)]
        + [f"Machine {i + 1} mp-status" for i in range(m)]
        + [f"Machine {i + 1} progress" for i in range(m)]
        + [f"Buffer {k + 1} level" for k in range(m - 1)]
        + [f"Machine {i + 1} robot status" for i in range(m)]
    )
    lines = []
    for idx, label in enumerate(labels):
        value = "{state[%d]}" % idx if values is None else values[idx]
        end = "." if idx == len(labels) - 1 else ";"
        lines.append(f"{label}: {value}{end}")
    return "\n".join(lines)


def _possible_actions(cfg: LineConfig) -> str:
    m = cfg.machine_count
    lines = [f"Action {i + 1} (0,{i}): Load machine {i + 1}{'.' if i == m - 1 else ';'}" for i in range(m)]
    return "\n".join(lines)


def _feasibility_block(cfg: LineConfig, i: int) -> str:
    n = i + 1
    m = cfg.machine_count
    lines = [f"Action {n} (Load Machine {n}):", "Feasible if:"]
    if i < m - 1:
        lines.append(f"Buffer {n} level < {cfg.buffer_capacity[i]};")
    lines += [
        f"Machine {n} robot status is 0 (not assigned);",
        f"Machine {n} is running (running status = 1);",
        "Either:",
    ]
    if i == 0:
        lines.append(f"Machine {n} mp-status is 0 (not loaded), or")
    else:
        lines.append(f"Machine {n} mp-status is 0 (not loaded) and Buffer {i} level > 0, or")
    lines.append(f"Machine {n} mp-status is 1 and progress is 0 (part has been processed and ready to be unloaded.)")
    return "\n".join(lines)


def _feasibility_criteria(cfg: LineConfig, detail: str) -> str:
    if detail == "paper":
        return _feasibility_block(cfg, 0)
    return "\n\n".join(_feasibility_block(cfg, i) for i in range(cfg.machine_count))


def _action_prioritization(cfg: LineConfig, priorities: PriorityTable) -> str:
    order = priorities.order
    lines = ["If multiple actions are feasible, they must be prioritized as follows:"]
    for rank, i in enumerate(order):
        tag = f"Action {i + 1} (0,{i})"
        if rank == 0:
            lines.append(f"{tag} has the highest priority if feasible;")
        elif rank == len(order) - 1:
            lines.append(f"{tag} is the least prioritized action.")
        elif rank == 1:
            lines.append(f"{tag} comes next in priority;")
        else:
            lines.append(f"{tag} should be prioritized less than Action {order[rank - 1] + 1};")
    return "\n".join(lines)


def _output_structure(cfg: LineConfig, priorities: PriorityTable) -> str:
    r = cfg.robot_count
    idle = "[" + ", ".join(["(0,0)"] * r) + "]"
    # example: the second-highest priority machine, or the top one on two-machine lines
    example = priorities.order[1] if cfg.machine_count > 2 else priorities.order[0]
    if r == 1:
        return (
            f"Output exactly one action. For example, if only Action {example + 1} is feasible, "
            f"the output should be: `[(0,{example})]`.\n"
            "If multiple actions are feasible, output the highest-priority action.\n"
            f"If no actions are feasible, return `{idle}` to indicate that no machine can be loaded."
        )
    padded = "[" + ", ".join([f"(0,{example})"] + ["(0,0)"] * (r - 1)) + "]"
    first = "If only one action is feasible, it must be accompanied by Action 1 (0,0)."
    if r > 2:
        first = (
            f"If fewer than {_word(r)} actions are feasible, the remaining entries must be filled with Action 1 (0,0)."
        )
    return (
        f"{first} For example, if only Action {example + 1} is feasible, the output should be: `{padded}`.\n"
        "If multiple actions are feasible, output the actions in prioritized order.\n"
        f"If no actions are feasible, return `{idle}` to indicate that no machine can be loaded."
    )


def _task_objective(cfg: LineConfig) -> str:
    r = cfg.robot_count
    slots = ", ".join(f"(action{k + 1})" for k in range(r))
    who = "the robot" if r == 1 else f"the {_word(r)} robots"
    verb = "what action should be assigned to" if r == 1 else "what actions should be assigned to"
    return (
        f"Based on these states, criteria, and the goal of maximizing production throughput, {verb} {who}? "
        f"The output must be in the format `[{slots}]` without additional details. "
        "The feasibility criteria must be strictly followed."
    )


def format_state_values(state: SystemState, config: LineConfig) -> list[str]:
    vec = encode_state_vector(state, config)
    m = config.machine_count
    out = []
    for idx, v in enumerate(vec):
        if 2 * m <= idx < 3 * m:
            out.append(f"{round(v, 2):g}")
        else:
            out.append(str(int(v)))
    return out


def build_prompt_template(
    config: LineConfig,
    priorities: Optional[PriorityTable] = None,
    detail: str = "paper",
) -> PromptBundle:
    """All eight sections with ``{state[k]}`` placeholders in the state section.

    ``detail="paper"`` spells out the feasibility conditions for action 1
    only; ``detail="full"`` gives one block per action.
    """
    return _bundle(config, None, priorities, detail)


def build_prompt(
    config: LineConfig,
    state: SystemState,
    priorities: Optional[PriorityTable] = None,
    detail: str = "paper",
) -> PromptBundle:
    return _bundle(config, format_state_values(state, config), priorities, detail)


def _bundle(config, values, priorities, detail) -> PromptBundle:
    if detail not in ("paper", "full"):
        raise ValueError(f"unknown prompt detail level {detail!r}")
    priorities = priorities or PriorityTable.downstream_first(config.machine_count)
    if len(priorities.order) != config.machine_count:
        raise ValueError("priority table does not match machine count")
    return PromptBundle(
        system_dynamics=_system_dynamics(config),
        parameter_definitions=_PARAMETER_DEFINITIONS,
        real_time_state=_real_time_state(config, values),
        possible_actions=_possible_actions(config),
        feasibility_criteria=_feasibility_criteria(config, detail),
        action_prioritization=_action_prioritization(config, priorities),
        output_structure=_output_structure(config, priorities),
        task_objective=_task_objective(config),
    )


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# -- reply parsing -------------------------------------------------------------

class ActionParseError(ValueError):
    pass


class NoActionList(ActionParseError):
    pass


class BadArity(ActionParseError):
    pass


class IndexOutOfRange(ActionParseError):
    pass


_LIST_RE = re.compile(r"\[\s*\(\s*-?\d+\s*,\s*-?\d+\s*\)(?:\s*,\s*\(\s*-?\d+\s*,\s*-?\d+\s*\))*\s*,?\s*\]")
_PAIR_RE = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)")


def parse_actions(reply: str, robot_count: int, machine_count: int) -> JointAction:
    """Pull the first ``[(0,a), (0,b), ...]`` list out of a reply."""
    match = _LIST_RE.search(reply or "")
    if match is None:
        raise NoActionList(f"no action list found in reply: {reply[:80]!r}")
    pairs = [(int(a), int(b)) for a, b in _PAIR_RE.findall(match.group(0))]
    if len(pairs) != robot_count:
        raise BadArity(f"expected {robot_count} actions, got {len(pairs)}")
    for slot, machine in pairs:
        if slot != 0:
            raise IndexOutOfRange(f"reserved slot must be 0, got ({slot},{machine})")
        if not 0 <= machine < machine_count:
            raise IndexOutOfRange(f"machine index {machine} outside 0..{machine_count - 1}")
    return JointAction(tuple(b for _, b in pairs))


def extract_rationale(reply: str) -> Optional[str]:
    """Whatever text surrounds the action list, if any."""
    match = _LIST_RE.search(reply or "")
    rest = reply if match is None else reply[: match.start()] + reply[match.end():]
    rest = rest.strip().strip("`").strip()
    return rest or None


# -- transport -----------------------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4"
    temperature: float = 0.0
    timeout: float = 30.0
    retries: int = 2
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.retries < 0:
            raise ValueError("retries must be non-negative")


class TransportError(RuntimeError):
    pass


def chat_request_body(endpoint: EndpointConfig, prompt: str) -> dict:
    return {
        "model": endpoint.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
    }


class ChatClient:
    """Minimal chat-completions client; one user message per request."""

    def __init__(self, endpoint: EndpointConfig, transport: Optional[httpx.BaseTransport] = None):
        self.endpoint = endpoint
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(endpoint.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            headers=headers,
            timeout=endpoint.timeout,
            transport=transport,
        )

    def complete(self, prompt: str) -> str:
        body = chat_request_body(self.endpoint, prompt)
        last: Optional[Exception] = None
        for attempt in range(self.endpoint.retries + 1):
            try:
                resp = self._http.post("/chat/completions", json=body)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("chat request attempt %d failed: %s", attempt + 1, exc)
        raise TransportError(f"chat request failed after {self.endpoint.retries + 1} attempts: {last}") from last

    def close(self) -> None:
        self._http.close()


# -- transcripts and replay ----------------------------------------------------

TRANSCRIPT_FIELDS = ("step", "prompt_sha256", "prompt", "reply", "action", "error", "fallback_used", "latency_ms")


@dataclass
class Transcript:
    step: int
    prompt_sha256: str
    prompt: str
    reply: Optional[str]
    action: Optional[list[int]]
    error: Optional[str]
    fallback_used: bool
    latency_ms: float

    def __post_init__(self):
        if self.error is not None and not self.fallback_used:
            raise ValueError("a parse or transport error must be paired with fallback_used")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in TRANSCRIPT_FIELDS}, ensure_ascii=False)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ReplayMiss(KeyError):
    """No recorded reply for this (step, prompt); usually means the prompt drifted."""


class CorruptTranscript(ValueError):
    pass


class ReplayStore:
    """Recorded replies keyed by (step, prompt hash)."""

    def __init__(self, records: Iterable[Transcript] = ()):
        self.records: list[Transcript] = []
        self._index: dict[tuple[int, str], Transcript] = {}
        for rec in records:
            self.add(rec)

    def add(self, rec: Transcript) -> None:
        self.records.append(rec)
        if rec.reply is not None:
            self._index[(rec.step, rec.prompt_sha256)] = rec

    def lookup(self, step: int, prompt: str) -> str:
        rec = self._index.get((step, prompt_hash(prompt)))
        if rec is None:
            raise ReplayMiss((step, prompt_hash(prompt)[:12]))
        return rec.reply

    def __len__(self) -> int:
        return len(self._index)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReplayStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                    rec = Transcript(**{k: data[k] for k in TRANSCRIPT_FIELDS})
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise CorruptTranscript(f"{path}:{lineno}: {exc}") from exc
                if rec.prompt_sha256 != prompt_hash(rec.prompt):
                    raise CorruptTranscript(f"{path}:{lineno}: prompt hash mismatch")
                store.add(rec)
        return store


# -- the controller ------------------------------------------------------------

def llm_decide(
    state: SystemState,
    config: LineConfig,
    reply_source: Callable[[int, str], str],
    fallback,
    log_to: Optional[list[Transcript]] = None,
    priorities: Optional[PriorityTable] = None,
    detail: str = "paper",
) -> ControllerDecision:
    """Ask for an action; on any parse, transport or replay failure use ``fallback``.

    ``reply_source(step, prompt)`` returns the raw reply text.  ``fallback``
    is a controller with ``decide(state)``.
    """
    prompt = build_prompt(config, state, priorities, detail).render()
    started = time.perf_counter()
    reply: Optional[str] = None
    error: Optional[str] = None
    action: Optional[JointAction] = None
    try:
        reply = reply_source(state.clock, prompt)
        action = parse_actions(reply, config.robot_count, config.machine_count)
    except (ActionParseError, TransportError, ReplayMiss, httpx.HTTPError) as exc:
        error = f"{type(exc).__name__}: {exc}"
    latency = round((time.perf_counter() - started) * 1000.0, 3)

    if action is None:
        decision = fallback.decide(state)
        decision = ControllerDecision(decision.joint_action, decision.source, rationale=error, fallback_used=True)
    else:
        # replies are ranked requests; idle robots take them in index order
        decision = ControllerDecision(distribute_to_idle(action, state), "llm", rationale=extract_rationale(reply))
    decision.joint_action.validate(config.robot_count, config.machine_count)
    if log_to is not None:
        log_to.append(
            Transcript(
                step=state.clock,
                prompt_sha256=prompt_hash(prompt),
                prompt=prompt,
                reply=reply,
                action=list(action.targets) if action is not None else None,
                error=error,
                fallback_used=decision.fallback_used,
                latency_ms=latency,
            )
        )
    return decision


class LLMController:
    """Prompt-driven controller.

    ``mode`` is ``"replay"`` (serve replies from ``store``), ``"live"``
    (query the endpoint) or ``"record"`` (live, keeping every exchange so it
    can be saved and replayed later).  ``record_to`` appends every exchange
    to a transcript file as it happens.
    """

    wip_cap = None

    def __init__(
        self,
        config: LineConfig,
        mode: str = "replay",
        store: Optional[ReplayStore] = None,
        endpoint: Optional[EndpointConfig] = None,
        fallback=None,
        transport: Optional[httpx.BaseTransport] = None,
        priorities: Optional[PriorityTable] = None,
        detail: str = "paper",
        record_to: Optional[Union[str, Path]] = None,
    ):
        if mode not in ("replay", "live", "record"):
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        self.store = store if store is not None else ReplayStore()
        self.priorities = priorities
        self.detail = detail
        self.fallback = fallback or RulePriorityController(config, priorities)
        self.transcripts: list[Transcript] = []
        self.client = ChatClient(endpoint or EndpointConfig(), transport) if mode != "replay" else None
        self.record_to = Path(record_to) if record_to is not None else None

    def _reply(self, step: int, prompt: str) -> str:
        if self.mode == "replay":
            return self.store.lookup(step, prompt)
        return self.client.complete(prompt)

    def decide(self, state: SystemState) -> ControllerDecision:
        decision = llm_decide(
            state, self.config, self._reply, self.fallback, self.transcripts, self.priorities, self.detail
        )
        if self.record_to is not None:
            with open(self.record_to, "a", encoding="utf-8") as fh:
                fh.write(self.transcripts[-1].to_json() + "\n")
        return decision

    def recorded_store(self) -> ReplayStore:
        return ReplayStore(self.transcripts)
