import json
import re
from pathlib import Path

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from serialline.heuristics import PriorityTable, RulePriorityController
from serialline.llm import (
    SECTIONS,
    BadArity,
    ChatClient,
    CorruptTranscript,
    EndpointConfig,
    IndexOutOfRange,
    LLMController,
    NoActionList,
    PromptBundle,
    ReplayMiss,
    ReplayStore,
    Transcript,
    TransportError,
    build_prompt,
    build_prompt_template,
    chat_request_body,
    extract_rationale,
    llm_decide,
    normalize_whitespace,
    parse_actions,
    prompt_hash,
)
from serialline.model import JointAction, LineConfig, MachineState, format_actions
from serialline.sim import reset, run_episode

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden" / "config2"


def _feasible_3_and_4(config2):
    s = reset(config2)
    s.machines = [MachineState(has_part=1, progress=0.5), MachineState(has_part=1, progress=0.5),
                  MachineState(has_part=1, progress=1.0), MachineState(has_part=1, progress=1.0)]
    s.buffers = [1, 1, 1]
    s.produced = [3, 2, 1, 0]
    return s


# -- prompt ---------------------------------------------------------------------

def test_config2_system_dynamics(config2):
    text = build_prompt(config2, reset(config2)).system_dynamics
    assert "four machines" in text and "Two robots" in text and "Machine 2 being the slowest" in text


def test_fresh_state_shows_no_parts(config2):
    text = build_prompt(config2, reset(config2)).real_time_state
    assert re.findall(r"mp-status: (\S+)[;.]", text) == ["0"] * 4


def test_config1_has_two_actions(config1):
    text = build_prompt(config1, reset(config1)).possible_actions
    assert len(text.splitlines()) == 2 and "Action 2 (0,1): Load machine 2." in text


def test_template_placeholders_cover_state_vector(config2):
    text = build_prompt_template(config2).real_time_state
    assert re.findall(r"\{state\[(\d+)\]\}", text) == [str(k) for k in range(19)]


@pytest.mark.parametrize("name", SECTIONS)
def test_config2_sections_match_golden(config2, name):
    golden = (GOLDEN / f"{name}.txt").read_text()
    assert normalize_whitespace(build_prompt_template(config2).sections()[name]) == normalize_whitespace(golden)


def test_single_robot_wording(config1):
    p = build_prompt(config1, reset(config1))
    assert "One robot is in the system" in p.system_dynamics
    assert "All machines have the same processing time of 3 minutes" in p.system_dynamics
    assert "`[(action1)]`" in p.task_objective and "the robot?" in p.task_objective
    assert "`[(0,0)]`" in p.output_structure


def test_generalized_wording():
    cfg = LineConfig(processing_time=[2, 5, 5], buffer_capacity=[2, 4], robot_count=2)
    p = build_prompt_template(cfg, detail="full")
    assert "three machines (Machines 1–3)" in p.system_dynamics
    assert "capacities of 2 and 4 parts" in p.system_dynamics
    assert "Machines 2 and 3 being the slowest" in p.system_dynamics
    assert p.feasibility_criteria.count("Feasible if:") == 3
    assert "Buffer 2 level < 4;" in p.feasibility_criteria
    assert p.action_prioritization.splitlines()[1].startswith("Action 3 (0,2) has the highest")


def test_three_robot_output_structure():
    cfg = LineConfig(processing_time=[3] * 5, buffer_capacity=[3] * 4, robot_count=3)
    p = build_prompt_template(cfg)
    assert "fewer than three actions" in p.output_structure
    assert "[(0,3), (0,0), (0,0)]" in p.output_structure


def test_prompt_errors(config2):
    with pytest.raises(ValueError):
        build_prompt_template(config2, PriorityTable((0, 1)))
    with pytest.raises(ValueError):
        build_prompt_template(config2, detail="terse")
    with pytest.raises(ValueError):
        PromptBundle(*(["x"] * 7 + [" "]))


def test_rendered_prompt_has_all_titles(config2):
    text = build_prompt(config2, reset(config2)).render()
    for title in ("System dynamics:", "Parameter definitions:", "Real-time state:", "Possible actions:",
                  "Feasibility criteria:", "Action prioritization:", "Output structure:", "Task objective:"):
        assert title in text


# -- parsing --------------------------------------------------------------------

def test_parse_examples():
    assert parse_actions("[(0,2), (0,0)]", 2, 4) == JointAction.of(2, 0)
    assert parse_actions("[(0,0), (0,0)]", 2, 4) == JointAction.of(0, 0)
    with pytest.raises(NoActionList):
        parse_actions("Load machine 3 please", 2, 4)


@pytest.mark.parametrize(
    "reply, error",
    [("[(0,2)]", BadArity), ("[(0,4), (0,0)]", IndexOutOfRange), ("[(1,2), (0,0)]", IndexOutOfRange),
     ("(0,2), (0,0)", NoActionList), ("", NoActionList)],
)
def test_parse_errors_are_distinct(reply, error):
    with pytest.raises(error):
        parse_actions(reply, 2, 4)


def test_rationale_kept():
    reply = "[(0,3), (0,2)]\n\nExplanation: machine 4 has a finished part."
    assert parse_actions(reply, 2, 4) == JointAction.of(3, 2)
    assert extract_rationale(reply) == "Explanation: machine 4 has a finished part."
    assert extract_rationale("[(0,3), (0,2)]") is None


@given(st.integers(1, 4).flatmap(lambda r: st.tuples(st.just(r), st.lists(st.integers(0, 5), min_size=r, max_size=r))))
def test_format_then_parse_is_identity(arg):
    r, targets = arg
    action = JointAction(tuple(targets))
    assert parse_actions(format_actions(action), r, 6) == action


@given(st.text(alphabet=st.sampled_from("[](),0123456789 -abc\n`"), max_size=40))
def test_decisions_always_in_range(reply):
    cfg = LineConfig(processing_time=[3, 4, 3, 3], buffer_capacity=[3, 3, 3], robot_count=2)
    s = reset(cfg)
    d = llm_decide(s, cfg, lambda step, prompt: reply, RulePriorityController(cfg))
    assert len(d.joint_action.targets) == 2
    assert all(0 <= t < 4 for t in d.joint_action.targets)


# -- transport --------------------------------------------------------------------

def _reply_transport(text, log=None, fail_first=0):
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if log is not None:
            log.append(request)
        if calls["n"] <= fail_first:
            return httpx.Response(503, json={"error": "busy"})
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})

    return httpx.MockTransport(handler), calls


def test_request_shape_and_credentials(monkeypatch):
    monkeypatch.setenv("TEST_LLM_KEY", "sk-test")
    seen = []
    transport, _ = _reply_transport("[(0,0), (0,0)]", seen)
    ep = EndpointConfig(base_url="http://llm.local/v1", model="gpt-4", api_key_env="TEST_LLM_KEY")
    client = ChatClient(ep, transport)
    assert client.complete("hello") == "[(0,0), (0,0)]"
    req = seen[0]
    assert req.url.path == "/v1/chat/completions"
    assert req.headers["Authorization"] == "Bearer sk-test"
    assert json.loads(req.content) == chat_request_body(ep, "hello")
    assert json.loads(req.content) == {"model": "gpt-4", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.0}


def test_retries_then_success():
    transport, calls = _reply_transport("[(0,1)]", fail_first=2)
    client = ChatClient(EndpointConfig(base_url="http://x/v1", retries=2), transport)
    assert client.complete("p") == "[(0,1)]" and calls["n"] == 3


def test_retries_exhausted():
    transport, calls = _reply_transport("[(0,1)]", fail_first=10)
    client = ChatClient(EndpointConfig(base_url="http://x/v1", retries=1), transport)
    with pytest.raises(TransportError):
        client.complete("p")
    assert calls["n"] == 2


def test_timeout_falls_back(config2):
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    ctrl = LLMController(config2, mode="live", endpoint=EndpointConfig(base_url="http://x/v1", retries=0),
                         transport=httpx.MockTransport(handler))
    d = ctrl.decide(reset(config2))
    assert d.fallback_used and d.source == "rule_priority"
    assert d.joint_action == JointAction.of(0, 0)
    assert ctrl.transcripts[-1].fallback_used and "TransportError" in ctrl.transcripts[-1].error


def test_endpoint_validation():
    with pytest.raises(ValueError):
        EndpointConfig(timeout=0)
    with pytest.raises(ValueError):
        EndpointConfig(temperature=-0.1)
    assert EndpointConfig().temperature == 0.0


# -- decisions and replay -----------------------------------------------------------

def test_recorded_reply_decision(config2):
    s = _feasible_3_and_4(config2)
    prompt = build_prompt(config2, s).render()
    store = ReplayStore([Transcript(s.clock, prompt_hash(prompt), prompt, "[(0,3), (0,2)]", None, None, False, 0.0)])
    ctrl = LLMController(config2, store=store)
    d = ctrl.decide(s)
    assert d.joint_action == JointAction.of(3, 2) and d.source == "llm" and not d.fallback_used


def test_empty_store_falls_back_every_query(config2):
    ctrl = LLMController(config2, mode="replay")
    trace = run_episode(config2, ctrl, seed=0, horizon=60)
    rule = run_episode(config2, RulePriorityController(config2), seed=0, horizon=60)
    queries = sum(rec.action is not None for rec in trace.steps)
    assert len(ctrl.transcripts) == queries > 0
    assert all(t.fallback_used and t.error.startswith("ReplayMiss") for t in ctrl.transcripts)
    assert [r.state for r in trace.steps] == [r.state for r in rule.steps]


def test_transcript_requires_fallback_flag_with_error():
    with pytest.raises(ValueError):
        Transcript(0, "h", "p", "x", None, "NoActionList: x", False, 0.0)


def test_save_load_480_records(tmp_path, config1):
    store = ReplayStore()
    for k in range(480):
        prompt = f"prompt {k}"
        store.add(Transcript(k, prompt_hash(prompt), prompt, "[(0,1)]", [1], None, False, 1.0))
    path = tmp_path / "t.jsonl"
    store.save(path)
    loaded = ReplayStore.load(path)
    assert len(loaded) == 480
    assert all(loaded.lookup(k, f"prompt {k}") == "[(0,1)]" for k in range(480))
    with pytest.raises(ReplayMiss):
        loaded.lookup(3, "prompt 3 (edited)")


def test_corrupt_transcript(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"step": 0, "prompt": "x"}\n')
    with pytest.raises(CorruptTranscript):
        ReplayStore.load(path)
    good = Transcript(0, prompt_hash("x"), "x", "[(0,0)]", [0], None, False, 0.0).to_json()
    path.write_text(good.replace(prompt_hash("x"), "0" * 64) + "\n")
    with pytest.raises(CorruptTranscript, match="hash"):
        ReplayStore.load(path)


def test_record_then_replay_is_identical(tmp_path, config2):
    def handler(request):
        # a deliberately odd policy: always ask for the two most downstream machines
        return httpx.Response(200, json={"choices": [{"message": {"content": "[(0,3), (0,2)]"}}]})

    cfg = config2.with_changes(horizon=80)
    live = LLMController(cfg, mode="record", endpoint=EndpointConfig(base_url="http://x/v1"),
                         transport=httpx.MockTransport(handler), record_to=tmp_path / "live.jsonl")
    first = run_episode(cfg, live, seed=5)
    live.recorded_store().save(tmp_path / "saved.jsonl")
    assert (tmp_path / "live.jsonl").read_text() == (tmp_path / "saved.jsonl").read_text()

    replay = LLMController(cfg, store=ReplayStore.load(tmp_path / "saved.jsonl"))
    second = run_episode(cfg, replay, seed=5)
    assert [r.action for r in first.steps] == [r.action for r in second.steps]
    assert not any(t.fallback_used for t in replay.transcripts)


def test_shipped_episode_replays_cleanly(config2):
    cfg = config2.with_changes(horizon=100)
    ctrl = LLMController(cfg, store=ReplayStore.load(FIXTURES / "llm_config2_episode.jsonl"), detail="full")
    trace = run_episode(cfg, ctrl, seed=0)
    rule = run_episode(cfg, RulePriorityController(cfg), seed=0)
    assert not any(t.fallback_used for t in ctrl.transcripts)
    assert trace.throughput == rule.throughput
    assert [r.state for r in trace.steps] == [r.state for r in rule.steps]
