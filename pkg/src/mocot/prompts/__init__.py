"""Verbatim prompt assets, one text file per pipeline stage / judge."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

PROMPT_NAMES = (
    "step1_plan",
    "step1_plan_typed",
    "step2_execute",
    "step3_meta",
    "step3_checker",
    "grpo_mcq",
    "memecap_open_ended",
    "eval_no_cot",
    "eval_cot",
    "judge_cas",
    "judge_usr",
)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """Return the prompt text for ``name`` (without trailing newline)."""
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt {name!r}; expected one of {PROMPT_NAMES}")
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")
