"""Builders that assemble mock-script entries for whole pipeline runs.

Each helper walks the deterministic message builders with the scripted stage
outputs, so the computed request keys match exactly what the engine will
send during replay.
"""

from __future__ import annotations

import json

from mocot.backend import ImageRef, ScriptedMockBackend, canonical_request_key
from mocot.engine import (
    CVQAInstance,
    build_checker_messages,
    build_direct_messages,
    build_execute_messages,
    build_meta_messages,
    build_plan_messages,
)
from mocot.parsing import normalize_option_label, parse_plan, parse_subresult, parse_verdict

def make_image(tag: str = "img-1") -> ImageRef:
    return ImageRef("url", f"https://example.test/{tag}.png")


def make_instance(
    instance_id: str = "q1",
    n_options: int = 4,
    gold: str = "B",
    question: str = "What deeper point does the cartoon make?",
    mode: str = "mcq",
) -> CVQAInstance:
    if mode == "open-ended":
        return CVQAInstance(
            id=instance_id,
            image=make_image(instance_id),
            question=question,
            options=(),
            gold_answer="the cat pretends to work at the keyboard",
            mode="open-ended",
        )
    labels = [chr(ord("A") + i) for i in range(n_options)]
    options = tuple((label, f"option {label} text") for label in labels)
    return CVQAInstance(
        id=instance_id,
        image=make_image(instance_id),
        question=question,
        options=options,
        gold_answer=gold,
        mode="mcq",
    )


def fenced(obj: dict) -> str:
    return "```json\n" + json.dumps(obj, ensure_ascii=False) + "\n```"


def plan_json(*sub_questions: str, cot: str = "think about the drawing") -> dict:
    return {"cot": cot, "sub_questions": list(sub_questions)}


def subresult_json(answer: str, cot: str = "the drawing shows it") -> dict:
    return {"cot": cot, "answer": answer}


def meta_json(answer: str, cot1: str = "sub-answers reviewed", cot2: str | None = None) -> dict:
    return {"cot1": cot1, "cot2": cot2 or f"the evidence points to {answer}", "answer": answer}


def verdict_json(
    matched: str,
    consistent: bool,
    justification: str = "reasoning checked",
    corrected: str | None = None,
) -> dict:
    value = {
        "Matched Answer": matched,
        "Is Consistent": consistent,
        "Justification": justification,
    }
    if corrected is not None:
        value["Corrected CoT2"] = corrected
    elif not consistent:
        value["Corrected CoT2"] = f"the corrected reasoning supports {matched}"
    return value


def pipeline_entries(
    instance: CVQAInstance,
    plan_obj: dict,
    sub_objs: list[dict],
    meta_objs: list[dict],
    verdict_objs: list[dict],
    variant: str = "verbatim",
) -> list[dict]:
    """Entries for one run: plan, K executes, then meta/verdict per attempt."""
    entries = []

    def add(messages, obj):
        entries.append(
            {
                "key": canonical_request_key(messages),
                "response": fenced(obj),
                "finish_reason": "stop",
            }
        )

    add(build_plan_messages(instance, variant), plan_obj)
    plan = parse_plan(plan_obj)
    if len(sub_objs) != len(plan.sub_questions):
        raise ValueError("one sub-result per planned sub-question required")
    for question, obj in zip(plan.sub_questions, sub_objs):
        add(build_execute_messages(instance, question), obj)
    sub_results = tuple(
        (question, parse_subresult(obj)) for question, obj in zip(plan.sub_questions, sub_objs)
    )
    feedback = None
    for meta_obj, verdict_obj in zip(meta_objs, verdict_objs):
        add(build_meta_messages(instance, sub_results, feedback), meta_obj)
        claimed = normalize_option_label(meta_obj["answer"], instance.option_labels)
        add(build_checker_messages(meta_obj["cot2"], claimed, instance.options), verdict_obj)
        feedback = parse_verdict(verdict_obj, instance.option_labels)
    return entries


def direct_entries(instance: CVQAInstance, variant: str, response_text: str) -> list[dict]:
    return [
        {
            "key": canonical_request_key(build_direct_messages(instance, variant)),
            "response": response_text,
            "finish_reason": "stop",
        }
    ]


def backend_from_entries(entries: list[dict]) -> ScriptedMockBackend:
    return ScriptedMockBackend(entries)
