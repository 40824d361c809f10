"""Plan -> execute -> verify pipeline over per-stage chat backends.

One planner call decomposes the instance into typed sub-questions, one
executor call answers each sub-question against the image, a meta stage
consolidates them into a diagnostic rationale (dtr) and final inference
rationale (fir) plus an answer, and a text-only checker accepts the answer
iff the fir entails it. Rejections re-run the meta stage with the checker's
feedback appended, up to a retry budget; at exhaustion the checker's own
matched answer and corrected rationale are adopted.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Sequence

from .backend import Backend, BackendConfig, ChatMessage, ContentPart, ImageRef, build_backend
from .errors import MocotError, StageError
from .parsing import (
    CheckerVerdict,
    MetaOutput,
    Plan,
    SubQuestion,
    SubResult,
    TaggedOutput,
    ensure_option_label,
    extract_fenced_json,
    normalize_option_label,
    parse_meta,
    parse_plan,
    parse_subresult,
    parse_tagged_output,
    parse_verdict,
)
from .prompts import load_prompt

DIRECT_VARIANTS = ("no-cot", "cot", "grpo-tagged")
TERMINATION_ACCEPTED = "checker-accepted"
TERMINATION_EXHAUSTED = "budget-exhausted-checker-corrected"


@dataclass(frozen=True)
class CVQAInstance:
    """One task unit: image, question, options (empty for open-ended), gold."""

    id: str
    image: ImageRef
    question: str
    options: tuple[tuple[str, str], ...] = ()  # (label, option text)
    gold_answer: str = ""
    mode: str = "mcq"  # "mcq" | "open-ended"

    def __post_init__(self):
        if self.mode not in ("mcq", "open-ended"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "mcq":
            if len(self.options) < 2:
                raise ValueError("mcq instance needs at least 2 options")
            for label, _ in self.options:
                ensure_option_label(label)
            if self.gold_answer and self.gold_answer not in self.option_labels:
                raise ValueError(f"gold answer {self.gold_answer!r} not among option labels")

    @property
    def option_labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.options)


@dataclass(frozen=True)
class StageConfig:
    """Per-stage backend configs plus the verification retry budget."""

    planner: BackendConfig
    executor: BackendConfig
    meta: BackendConfig
    checker: BackendConfig
    max_verify_retries: int = 3
    planner_prompt_variant: str = "verbatim"  # or "typed"

    def __post_init__(self):
        if self.max_verify_retries < 0:
            raise ValueError("max_verify_retries must be >= 0")
        if self.planner_prompt_variant not in ("verbatim", "typed"):
            raise ValueError(f"unknown planner prompt variant {self.planner_prompt_variant!r}")


@dataclass(frozen=True)
class MoCoTTrace:
    """Full pipeline record for one instance."""

    plan: Plan
    sub_results: tuple[tuple[SubQuestion, SubResult], ...]
    dtr: str
    fir: str
    answer: str
    verdicts: tuple[CheckerVerdict, ...]
    retries_used: int
    termination: str

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "sub_results": [
                {"sub_question": q.text, "type": q.subgoal_type, **r.to_dict()}
                for q, r in self.sub_results
            ],
            "dtr": self.dtr,
            "fir": self.fir,
            "answer": self.answer,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "retries_used": self.retries_used,
            "termination": self.termination,
        }


@dataclass
class StageBackends:
    planner: Backend
    executor: Backend
    meta: Backend
    checker: Backend

    @classmethod
    def from_config(cls, cfg: StageConfig) -> "StageBackends":
        return cls(
            planner=build_backend(cfg.planner),
            executor=build_backend(cfg.executor),
            meta=build_backend(cfg.meta),
            checker=build_backend(cfg.checker),
        )


# --- message builders (deterministic; mock fixture keys depend on these) -----

def format_options(options: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"{label}. {text}" for label, text in options)


def build_plan_messages(instance: CVQAInstance, variant: str = "verbatim") -> list[ChatMessage]:
    prompt = load_prompt("step1_plan_typed" if variant == "typed" else "step1_plan")
    return [
        ChatMessage.text("system", prompt),
        ChatMessage.user(
            ContentPart.from_image(instance.image),
            ContentPart.from_text(f"Question: {instance.question}"),
        ),
    ]


def build_execute_messages(instance: CVQAInstance, sub_question: SubQuestion) -> list[ChatMessage]:
    text = f"Sub-question type: {sub_question.subgoal_type}\nSub-question: {sub_question.text}"
    return [
        ChatMessage.text("system", load_prompt("step2_execute")),
        ChatMessage.user(
            ContentPart.from_image(instance.image),
            ContentPart.from_text(text),
        ),
    ]


def build_meta_messages(
    instance: CVQAInstance,
    sub_results: Sequence[tuple[SubQuestion, SubResult]],
    feedback: CheckerVerdict | None = None,
) -> list[ChatMessage]:
    lines = [f"Question: {instance.question}"]
    if instance.options:
        lines.append("Options:")
        lines.append(format_options(instance.options))
    lines.append("Sub-questions and sub-answers:")
    for i, (question, result) in enumerate(sub_results, start=1):
        lines.append(f"{i}. [{question.subgoal_type}] Q: {question.text}")
        lines.append(f"   A: {result.answer}")
    if feedback is not None:
        lines.append("")
        lines.append("A previous attempt was rejected by a logical checker. Address this feedback:")
        lines.append(f"- Checker matched answer: {feedback.matched_answer}")
        lines.append(f"- Justification: {feedback.justification}")
    return [
        ChatMessage.text("system", load_prompt("step3_meta")),
        ChatMessage.user(
            ContentPart.from_image(instance.image),
            ContentPart.from_text("\n".join(lines)),
        ),
    ]


def build_checker_messages(
    fir: str, claimed: str, options: Sequence[tuple[str, str]]
) -> list[ChatMessage]:
    # The checker is text-only by design: no image part.
    lines = ["Options:", format_options(options), f"Final answer: {claimed}", f"cot2: {fir}"]
    return [
        ChatMessage.text("system", load_prompt("step3_checker")),
        ChatMessage.text("user", "\n".join(lines)),
    ]


def build_direct_messages(instance: CVQAInstance, variant: str) -> list[ChatMessage]:
    if variant == "no-cot":
        prompt = load_prompt("eval_no_cot")
    elif variant == "cot":
        prompt = load_prompt("eval_cot")
    elif variant == "grpo-tagged":
        prompt = load_prompt("memecap_open_ended" if instance.mode == "open-ended" else "grpo_mcq")
    else:
        raise ValueError(f"unknown direct variant {variant!r}")
    lines = [f"Question: {instance.question}"]
    if instance.options:
        lines.append("Options:")
        lines.append(format_options(instance.options))
    return [
        ChatMessage.text("system", prompt),
        ChatMessage.user(
            ContentPart.from_image(instance.image),
            ContentPart.from_text("\n".join(lines)),
        ),
    ]


# --- checker call shared with the logic reward --------------------------------

def run_checker(
    fir: str,
    claimed: str,
    options: Sequence[tuple[str, str]],
    backend: Backend,
) -> CheckerVerdict:
    """Ask the checker whether ``fir`` entails ``claimed``; parse its verdict."""
    if not fir:
        raise ValueError("fir must be non-empty")
    response = backend.complete(build_checker_messages(fir, claimed, options))
    extracted = extract_fenced_json(response.text)
    return parse_verdict(extracted.value, [label for label, _ in options])


# --- the engine ----------------------------------------------------------------

class MocotEngine:
    """Binds a stage config to live backends and runs the pipeline."""

    def __init__(self, cfg: StageConfig, backends: StageBackends | None = None):
        self.cfg = cfg
        self.backends = backends or StageBackends.from_config(cfg)

    def plan(self, instance: CVQAInstance) -> Plan:
        messages = build_plan_messages(instance, self.cfg.planner_prompt_variant)
        with _stage("plan"):
            response = self.backends.planner.complete(messages)
            return parse_plan(extract_fenced_json(response.text).value)

    def execute(self, instance: CVQAInstance, sub_question: SubQuestion) -> SubResult:
        messages = build_execute_messages(instance, sub_question)
        with _stage("execute"):
            response = self.backends.executor.complete(messages)
            return parse_subresult(extract_fenced_json(response.text).value)

    def meta_reason(
        self,
        instance: CVQAInstance,
        sub_results: Sequence[tuple[SubQuestion, SubResult]],
        feedback: CheckerVerdict | None = None,
    ) -> MetaOutput:
        messages = build_meta_messages(instance, sub_results, feedback)
        with _stage("meta"):
            response = self.backends.meta.complete(messages)
            meta = parse_meta(extract_fenced_json(response.text).value)
            answer = normalize_option_label(meta.answer, instance.option_labels)
            return replace(meta, answer=answer)

    def verify(self, fir: str, claimed: str, options: Sequence[tuple[str, str]]) -> CheckerVerdict:
        with _stage("verify"):
            return run_checker(fir, claimed, options, self.backends.checker)

    def run_pipeline(self, instance: CVQAInstance) -> MoCoTTrace:
        """Run plan -> execute(xK) -> meta -> verify with the retry loop.

        Any stage error aborts the instance with a stage-tagged error; an
        answer is never silently substituted outside the documented
        budget-exhaustion fallback.
        """
        if instance.mode != "mcq":
            raise StageError("plan", ValueError("the pipeline requires an mcq instance"))
        plan = self.plan(instance)
        sub_results = tuple(
            (question, self.execute(instance, question)) for question in plan.sub_questions
        )
        feedback: CheckerVerdict | None = None
        verdicts: list[CheckerVerdict] = []
        meta: MetaOutput | None = None
        for attempt in range(self.cfg.max_verify_retries + 1):
            meta = self.meta_reason(instance, sub_results, feedback)
            verdict = self.verify(meta.cot2, meta.answer, instance.options)
            verdicts.append(verdict)
            if verdict.is_consistent and verdict.matched_answer == meta.answer:
                return MoCoTTrace(
                    plan=plan,
                    sub_results=sub_results,
                    dtr=meta.cot1,
                    fir=meta.cot2,
                    answer=meta.answer,
                    verdicts=tuple(verdicts),
                    retries_used=attempt,
                    termination=TERMINATION_ACCEPTED,
                )
            feedback = verdict
        last = verdicts[-1]
        return MoCoTTrace(
            plan=plan,
            sub_results=sub_results,
            dtr=meta.cot1,
            fir=last.corrected_cot2,
            answer=last.matched_answer,
            verdicts=tuple(verdicts),
            retries_used=self.cfg.max_verify_retries,
            termination=TERMINATION_EXHAUSTED,
        )


@contextmanager
def _stage(name: str):
    """Tag any escaping toolkit error with the pipeline stage that raised it."""
    try:
        yield
    except StageError:
        raise
    except MocotError as exc:
        raise StageError(name, exc) from exc


# --- module-level operation wrappers ------------------------------------------

def plan(instance: CVQAInstance, cfg: StageConfig) -> Plan:
    return MocotEngine(cfg).plan(instance)


def execute(instance: CVQAInstance, sub_question: SubQuestion, cfg: StageConfig) -> SubResult:
    return MocotEngine(cfg).execute(instance, sub_question)


def meta_reason(
    instance: CVQAInstance,
    sub_results: Sequence[tuple[SubQuestion, SubResult]],
    cfg: StageConfig,
) -> MetaOutput:
    return MocotEngine(cfg).meta_reason(instance, sub_results)


def verify(
    fir: str, claimed: str, options: Sequence[tuple[str, str]], cfg: StageConfig
) -> CheckerVerdict:
    return MocotEngine(cfg).verify(fir, claimed, options)


def run_pipeline(instance: CVQAInstance, cfg: StageConfig) -> MoCoTTrace:
    return MocotEngine(cfg).run_pipeline(instance)


def run_direct(
    instance: CVQAInstance, backend: Backend, prompt_variant: str
) -> tuple[str, str | None]:
    """Single-call baseline; returns (answer, rationale-or-None)."""
    if prompt_variant not in DIRECT_VARIANTS:
        raise ValueError(f"unknown direct variant {prompt_variant!r}")
    messages = build_direct_messages(instance, prompt_variant)
    with _stage("direct"):
        response = backend.complete(messages)
        if prompt_variant == "grpo-tagged":
            tagged: TaggedOutput = parse_tagged_output(response.text, mode="lenient")
            if instance.mode == "open-ended":
                return tagged.answer, tagged.reasoning
            return (
                normalize_option_label(tagged.answer, instance.option_labels),
                tagged.reasoning,
            )
        value = extract_fenced_json(response.text).value
        raw_answer = value.get("answer")
        if isinstance(raw_answer, list):
            if len(raw_answer) != 1 or not isinstance(raw_answer[0], str):
                raise StageError("direct", ValueError("'answer' list must hold one string"))
            raw_answer = raw_answer[0]
        if not isinstance(raw_answer, str):
            raise StageError("direct", ValueError("missing 'answer' field"))
        answer = normalize_option_label(raw_answer, instance.option_labels)
        rationale = value.get("cot") if prompt_variant == "cot" else None
        return answer, rationale if isinstance(rationale, str) else None
