"""Four-part structured reward: format, accuracy, reasoning similarity, logic.

The reasoning-similarity term is masked to zero whenever the answer is
wrong, so rationalizations of incorrect predictions are never rewarded. The
total is the weighted sum of the four components.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

from .backend import Backend
from .engine import run_checker
from .errors import MocotError, ParseError
from .metrics import rouge_l
from .parsing import (
    extract_option_letter,
    find_forbidden_words,
    parse_cues_intent,
    parse_tagged_output,
)

logger = logging.getLogger(__name__)

DEFAULT_WEIGHT_VALUES = (0.05, 0.6, 0.2, 0.15)
OPEN_ENDED_ACCURACY_THRESHOLD = 0.3  # rouge-l F1 gate for open-ended answers
COMPONENT_NAMES = ("format", "accuracy", "reasoning", "logic")


@dataclass(frozen=True)
class VeraWeights:
    lambda1: float
    lambda2: float
    lambda3: float
    lambda4: float

    def __post_init__(self):
        if any(w < 0 for w in self.as_tuple()):
            raise ValueError("weights must be non-negative")
        if sum(self.as_tuple()) <= 0:
            raise ValueError("weights must not all be zero")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def without(self, component: str) -> "VeraWeights":
        """Drop one component and rescale the rest proportionally.

        The remaining weights keep their relative sizes and are scaled so
        their sum equals the original total.
        """
        if component not in COMPONENT_NAMES:
            raise ValueError(f"unknown component {component!r}")
        index = COMPONENT_NAMES.index(component)
        weights = list(self.as_tuple())
        removed = weights[index]
        remaining = sum(weights) - removed
        if remaining <= 0:
            raise ValueError("cannot drop the only non-zero component")
        scale = sum(weights) / remaining
        rescaled = [w * scale for w in weights]
        rescaled[index] = 0.0
        return VeraWeights(*rescaled)


DEFAULT_WEIGHTS = VeraWeights(*DEFAULT_WEIGHT_VALUES)


@dataclass(frozen=True)
class ReferenceRecord:
    """Gold answer plus the reference reasoning chain (the pipeline's fir)."""

    gold_answer: str
    reference_reasoning: str = ""


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_accuracy: float
    r_reasoning_raw: float
    r_reasoning_effective: float
    r_logic: float
    mask_applied: bool
    total: float

    def __post_init__(self):
        for name in ("r_format", "r_accuracy", "r_reasoning_raw", "r_reasoning_effective", "r_logic"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {value}")
        if self.mask_applied != (self.r_accuracy == 0.0):
            raise ValueError("mask_applied must hold exactly when accuracy is 0")
        expected = 0.0 if self.mask_applied else self.r_reasoning_raw
        if self.r_reasoning_effective != expected:
            raise ValueError("effective reasoning term inconsistent with mask")

    def to_record(self, output_id: str) -> dict:
        return {
            "output_id": output_id,
            "r_f": self.r_format,
            "r_a": self.r_accuracy,
            "r_r_raw": self.r_reasoning_raw,
            "r_r_eff": self.r_reasoning_effective,
            "r_l": self.r_logic,
            "total": self.total,
            "mask_applied": self.mask_applied,
        }


# --- components ----------------------------------------------------------------

def reward_format(output_text: str, mode: str = "mcq-tagged") -> float:
    """1 iff the output passes the strict structural contract, else 0.

    mcq-tagged: exactly one REASONING + one ANSWER span and the answer body
    maps to a single option letter. open-ended-template: additionally the
    REASONING body must follow the two-line CUES/INTENT template and neither
    body may contain a forbidden word.
    """
    if mode not in ("mcq-tagged", "open-ended-template"):
        raise ValueError(f"unknown format mode {mode!r}")
    try:
        tagged = parse_tagged_output(output_text, mode="strict")
    except ParseError:
        return 0.0
    if mode == "mcq-tagged":
        try:
            extract_option_letter(tagged.answer)
        except ParseError:
            return 0.0
        return 1.0
    try:
        cues = parse_cues_intent(tagged.reasoning)
    except ParseError:
        return 0.0
    if cues.forbidden or find_forbidden_words(tagged.answer):
        return 0.0
    return 1.0


def reward_accuracy(predicted: str, reference: ReferenceRecord, mode: str = "mcq") -> float:
    """mcq: exact label match after normalization; open-ended: rouge-l gate."""
    if mode == "mcq":
        try:
            label = extract_option_letter(predicted)
        except ParseError:
            return 0.0
        return 1.0 if label == extract_option_letter(reference.gold_answer) else 0.0
    if mode == "open-ended":
        return 1.0 if rouge_l(predicted, reference.gold_answer) >= OPEN_ENDED_ACCURACY_THRESHOLD else 0.0
    raise ValueError(f"unknown accuracy mode {mode!r}")


def reward_reasoning(
    generated_reasoning: str,
    reference: ReferenceRecord,
    r_accuracy: float,
    similarity: Callable[[str, str], float] = rouge_l,
) -> tuple[float, float]:
    """(raw, effective) similarity; effective is zeroed when the answer is wrong.

    ``similarity`` is pluggable (embedding-based scorers slot in here); the
    default is the repo-wide lexical scorer.
    """
    raw = similarity(generated_reasoning, reference.reference_reasoning)
    effective = raw if r_accuracy > 0 else 0.0
    return raw, effective


def reward_logic(
    fir_or_reasoning: str,
    predicted: str,
    options: Sequence[tuple[str, str]],
    checker_backend: Backend,
    failure_log: list | None = None,
) -> float:
    """1 iff the checker finds the reasoning consistent AND matching ``predicted``.

    A checker response that fails to parse scores 0 and is recorded; backend
    errors propagate so callers never mistake an outage for a zero verdict.
    """
    try:
        verdict = run_checker(fir_or_reasoning, predicted, options, checker_backend)
    except ParseError as exc:
        logger.warning("logic reward: checker output unparseable: %s", exc)
        if failure_log is not None:
            failure_log.append({"predicted": predicted, "error": str(exc)})
        return 0.0
    return 1.0 if verdict.is_consistent and verdict.matched_answer == predicted else 0.0


def vera_total(
    r_format: float,
    r_accuracy: float,
    r_reasoning_raw: float,
    r_logic: float,
    weights: VeraWeights = DEFAULT_WEIGHTS,
) -> RewardBreakdown:
    """Combine the four components into the weighted total with masking."""
    for name, value in (
        ("format", r_format),
        ("accuracy", r_accuracy),
        ("reasoning", r_reasoning_raw),
        ("logic", r_logic),
    ):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} component must be in [0,1], got {value}")
    mask_applied = r_accuracy == 0.0
    effective = 0.0 if mask_applied else r_reasoning_raw
    total = (
        weights.lambda1 * r_format
        + weights.lambda2 * r_accuracy
        + weights.lambda3 * effective
        + weights.lambda4 * r_logic
    )
    return RewardBreakdown(
        r_format=r_format,
        r_accuracy=r_accuracy,
        r_reasoning_raw=r_reasoning_raw,
        r_reasoning_effective=effective,
        r_logic=r_logic,
        mask_applied=mask_applied,
        total=total,
    )


# --- whole-output scoring ---------------------------------------------------------

def extract_predicted_label(output_text: str) -> str | None:
    """Best-effort label from a tagged output, lenient parse; None if hopeless."""
    try:
        tagged = parse_tagged_output(output_text, mode="lenient")
        return extract_option_letter(tagged.answer)
    except ParseError:
        return None


def score_output(
    output_text: str,
    reference: ReferenceRecord,
    mode: str = "mcq",
    weights: VeraWeights = DEFAULT_WEIGHTS,
    checker_backend: Backend | None = None,
    options: Sequence[tuple[str, str]] | None = None,
    failure_log: list | None = None,
) -> RewardBreakdown:
    """Score one raw output end to end.

    When strict formatting fails, accuracy is still salvaged from a lenient
    parse so the format and accuracy signals stay decoupled. The logic term
    requires a checker backend; without one it contributes 0.
    """
    format_mode = "open-ended-template" if mode == "open-ended" else "mcq-tagged"
    r_f = reward_format(output_text, format_mode)
    reasoning = ""
    answer: str | None = None
    try:
        tagged = parse_tagged_output(output_text, mode="lenient")
        reasoning, answer = tagged.reasoning, tagged.answer
    except ParseError:
        pass
    if mode == "mcq":
        label = extract_predicted_label(output_text)
        r_a = reward_accuracy(label, reference) if label is not None else 0.0
        predicted = label
    else:
        r_a = reward_accuracy(answer, reference, mode="open-ended") if answer else 0.0
        predicted = answer
    r_r_raw, _ = reward_reasoning(reasoning, reference, r_a)
    r_l = 0.0
    if mode == "mcq" and checker_backend is not None and predicted is not None and reasoning:
        if not options:
            raise MocotError("logic reward needs the instance options")
        r_l = reward_logic(reasoning, predicted, options, checker_backend, failure_log)
    return vera_total(r_f, r_a, r_r_raw, r_l, weights)
