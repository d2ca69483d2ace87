"""
Prompting, parsing and replaying the language-model controller
==============================================================

No network is needed: a recorded transcript answers every query.
"""

# %%
from pathlib import Path

from serialline import RulePriorityController, load_config_file, reset, run_episode
from serialline.llm import LLMController, ReplayStore, build_prompt, llm_decide, parse_actions

config = load_config_file("config2")
print(build_prompt(config, reset(config)).render())

# %%
print(parse_actions("Sure. [(0,3), (0,2)]", robot_count=2, machine_count=4))

# %%
# A malformed reply falls back to the rule-priority controller.
decision = llm_decide(reset(config), config, lambda step, prompt: "[(0,9)]", RulePriorityController(config))
print(decision)

# %%
transcript = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "llm_config2_episode.jsonl"
short = config.with_changes(horizon=100)
ctrl = LLMController(short, store=ReplayStore.load(transcript), detail="full")
trace = run_episode(short, ctrl, seed=0)
print(trace.throughput, len(ctrl.transcripts), sum(t.fallback_used for t in ctrl.transcripts))
