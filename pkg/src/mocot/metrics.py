"""Task metrics (accuracy, BLEU-4, ROUGE-L) and judge-based faithfulness metrics.

The two judge metrics score a rationale per sample: cas checks that the
rationale entails the predicted option but not a counterfactual one, and
usr measures the fraction of atomic claims in the rationale that the judge
flags as unsupported by the image/question.

Text-metric tokenization (shared repo-wide): lowercase, split on whitespace,
strip surrounding punctuation.
"""

from __future__ import annotations

import logging
import math
import random
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .backend import Backend, ChatMessage, ContentPart
from .engine import CVQAInstance, format_options
from .errors import JudgeParseError, MocotError, ParseError
from .parsing import extract_fenced_json, extract_option_letter
from .prompts import load_prompt

logger = logging.getLogger(__name__)

USR_CLAIM_COUNT = 5
PAD_TEXT = "<NONE>"


# --- tokenization -------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and unicodedata.category(raw[start]).startswith("P"):
            start += 1
        while end > start and unicodedata.category(raw[end - 1]).startswith("P"):
            end -= 1
        if end > start:
            tokens.append(raw[start:end])
    return tokens


# --- accuracy -----------------------------------------------------------------

def accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    """Exact-match fraction after option-label normalization."""
    if len(predictions) != len(golds):
        raise ValueError(f"length mismatch: {len(predictions)} vs {len(golds)}")
    if not predictions:
        raise ValueError("empty prediction list")
    hits = sum(
        extract_option_letter(p) == extract_option_letter(g)
        for p, g in zip(predictions, golds)
    )
    return hits / len(predictions)


# --- BLEU-4 ---------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, reference: str) -> float:
    """Sentence BLEU with uniform 1..4-gram weights, clipping, brevity penalty.

    No smoothing: any zero clipped precision gives 0 (so candidates shorter
    than four tokens score 0).
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_ngrams = _ngrams(cand, n)
        total = sum(cand_ngrams.values())
        if total == 0:
            return 0.0
        ref_ngrams = _ngrams(ref, n)
        clipped = sum(min(count, ref_ngrams[gram]) for gram, count in cand_ngrams.items())
        if clipped == 0:
            return 0.0
        log_sum += 0.25 * math.log(clipped / total)
    brevity = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return brevity * math.exp(log_sum)


# --- ROUGE-L --------------------------------------------------------------------

def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 with equal precision/recall weighting."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


# --- counterfactual selection ----------------------------------------------------

def select_counterfactual(
    predicted: str,
    options: Sequence[str],
    strategy: str = "next-label",
    rng: random.Random | None = None,
) -> str:
    """Pick an alternative option label, never equal to ``predicted``."""
    labels = list(options)
    if len(labels) < 2:
        raise ValueError("need at least 2 options to pick a counterfactual")
    if predicted not in labels:
        raise ValueError(f"predicted label {predicted!r} not among options")
    if strategy == "next-label":
        return labels[(labels.index(predicted) + 1) % len(labels)]
    if strategy == "seeded-random":
        if rng is None:
            raise ValueError("seeded-random strategy needs an rng")
        remaining = [label for label in labels if label != predicted]
        return rng.choice(remaining)
    raise ValueError(f"unknown counterfactual strategy {strategy!r}")


# --- judge calls ------------------------------------------------------------------

@dataclass(frozen=True)
class EntailmentJudgment:
    entails: int
    confidence: float
    support_spans: tuple[str, ...]
    counter_spans: tuple[str, ...]


@dataclass(frozen=True)
class CasRecord:
    counterfactual: str
    entails_predicted: int
    entails_counterfactual: int
    cas: int
    judge_confidence: float
    support_spans: tuple[str, ...]
    counter_spans: tuple[str, ...]

    def __post_init__(self):
        expected = int(self.entails_predicted == 1 and self.entails_counterfactual == 0)
        if self.cas != expected:
            raise ValueError("cas must equal 1[e+ = 1 and e- = 0]")


@dataclass(frozen=True)
class ClaimRecord:
    id: int
    text: str
    unsupported: int

    def __post_init__(self):
        if not 1 <= self.id <= USR_CLAIM_COUNT:
            raise ValueError(f"claim id {self.id} outside 1..{USR_CLAIM_COUNT}")
        if self.unsupported not in (0, 1):
            raise ValueError("unsupported flag must be 0 or 1")
        if self.text == PAD_TEXT and self.unsupported != 0:
            raise ValueError("padded claims must carry u = 0")


@dataclass(frozen=True)
class UsrResult:
    usr: float
    claims: tuple[ClaimRecord, ...]
    usr_unpadded: float | None  # over real claims only; None when all padded
    judge_usr: float | None  # the judge's own figure, kept for audit
    disagreement: bool


def _judge_user_message(instance: CVQAInstance, body: str) -> ChatMessage:
    lines = [f"Question: {instance.question}"]
    if instance.options:
        lines.append("Options:")
        lines.append(format_options(instance.options))
    lines.append(body)
    return ChatMessage.user(
        ContentPart.from_image(instance.image),
        ContentPart.from_text("\n".join(lines)),
    )


def _coerce_flag(value, name: str, raw: str) -> int:
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int) and value in (0, 1):
        return value
    raise JudgeParseError(f"{name} must be 0 or 1, got {value!r}", raw_text=raw)


def _judge_entailment(
    instance: CVQAInstance, claimed: str, rationale: str, judge: Backend
) -> EntailmentJudgment:
    body = f"Claimed answer: {claimed}\nRationale: {rationale}"
    messages = [
        ChatMessage.text("system", load_prompt("judge_cas")),
        _judge_user_message(instance, body),
    ]
    response = judge.complete(messages)
    try:
        value = extract_fenced_json(response.text).value
    except ParseError as exc:
        raise JudgeParseError(f"cas judge: {exc}", raw_text=response.text) from exc
    entails = _coerce_flag(value.get("entails"), "entails", response.text)
    confidence = value.get("confidence", 0.0)
    if not isinstance(confidence, (int, float)) or not 0.0 <= float(confidence) <= 1.0:
        raise JudgeParseError(f"confidence must be in [0,1], got {confidence!r}", raw_text=response.text)
    spans = []
    for key in ("support_spans", "counter_spans"):
        items = value.get(key, [])
        if not isinstance(items, list) or any(not isinstance(s, str) for s in items):
            raise JudgeParseError(f"{key} must be a list of strings", raw_text=response.text)
        spans.append(tuple(items))
    return EntailmentJudgment(entails, float(confidence), spans[0], spans[1])


def cas(
    instance: CVQAInstance,
    predicted: str,
    rationale: str,
    judge: Backend,
    strategy: str = "next-label",
    rng: random.Random | None = None,
) -> CasRecord:
    """Two entailment calls (predicted + counterfactual), combined by conjunction.

    The recorded confidence is the smaller of the two judgments; the spans
    come from the predicted-answer call.
    """
    if not rationale:
        raise ValueError("rationale must be non-empty")
    counterfactual = select_counterfactual(predicted, instance.option_labels, strategy, rng)
    positive = _judge_entailment(instance, predicted, rationale, judge)
    negative = _judge_entailment(instance, counterfactual, rationale, judge)
    return CasRecord(
        counterfactual=counterfactual,
        entails_predicted=positive.entails,
        entails_counterfactual=negative.entails,
        cas=int(positive.entails == 1 and negative.entails == 0),
        judge_confidence=min(positive.confidence, negative.confidence),
        support_spans=positive.support_spans,
        counter_spans=positive.counter_spans,
    )


def usr(instance: CVQAInstance, rationale: str, judge: Backend) -> UsrResult:
    """One claim-extraction call; the score is recomputed from the claim flags.

    The judge's own USR field is kept for audit only; a disagreement is
    logged, never trusted.
    """
    if not rationale:
        raise ValueError("rationale must be non-empty")
    messages = [
        ChatMessage.text("system", load_prompt("judge_usr")),
        _judge_user_message(instance, f"Rationale: {rationale}"),
    ]
    response = judge.complete(messages)
    try:
        value = extract_fenced_json(response.text).value
    except ParseError as exc:
        raise JudgeParseError(f"usr judge: {exc}", raw_text=response.text) from exc
    raw_claims = value.get("claims")
    if not isinstance(raw_claims, list) or not raw_claims:
        raise JudgeParseError("missing 'claims' list", raw_text=response.text)
    if len(raw_claims) > USR_CLAIM_COUNT:
        raise JudgeParseError(
            f"expected at most {USR_CLAIM_COUNT} claims, got {len(raw_claims)}",
            raw_text=response.text,
        )
    claims: list[ClaimRecord] = []
    for i, item in enumerate(raw_claims, start=1):
        if not isinstance(item, dict):
            raise JudgeParseError(f"claim {i} is not an object", raw_text=response.text)
        text = item.get("t")
        if not isinstance(text, str) or not text:
            raise JudgeParseError(f"claim {i} has no text", raw_text=response.text)
        flag = _coerce_flag(item.get("u"), f"claim {i} flag", response.text)
        try:
            claims.append(ClaimRecord(i, text, flag))
        except ValueError as exc:
            raise JudgeParseError(str(exc), raw_text=response.text) from exc
    while len(claims) < USR_CLAIM_COUNT:
        claims.append(ClaimRecord(len(claims) + 1, PAD_TEXT, 0))
    unsupported = sum(c.unsupported for c in claims)
    score = unsupported / USR_CLAIM_COUNT
    real = [c for c in claims if c.text != PAD_TEXT]
    unpadded = (sum(c.unsupported for c in real) / len(real)) if real else None
    judge_usr = value.get("USR")
    judge_usr = float(judge_usr) if isinstance(judge_usr, (int, float)) else None
    disagreement = judge_usr is not None and abs(judge_usr - score) > 1e-9
    if disagreement:
        logger.warning(
            "usr: judge reported %.3f but claim flags give %.3f (instance %s)",
            judge_usr, score, instance.id,
        )
    return UsrResult(score, tuple(claims), unpadded, judge_usr, disagreement)


# --- aggregation ------------------------------------------------------------------

METRIC_FIELDS = ("correct", "cas", "usr", "bleu4", "rouge_l")
_AGGREGATE_NAMES = {"correct": "accuracy"}


@dataclass(frozen=True)
class SampleRow:
    """Per-sample evaluation row; None marks a metric as excluded/not applicable."""

    id: str
    prediction: str | None
    correct: bool | None = None
    cas: int | None = None
    usr: float | None = None
    bleu4: float | None = None
    rouge_l: float | None = None
    failure_tag: str = "none"
    tag_source: str = "unassigned"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "prediction": self.prediction,
            "correct": self.correct,
            "cas": self.cas,
            "usr": self.usr,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "failure_tag": self.failure_tag,
            "tag_source": self.tag_source,
        }


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[SampleRow, ...]
    aggregates: dict[str, float]
    excluded: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "rows": [row.to_dict() for row in self.rows],
            "aggregates": dict(sorted(self.aggregates.items())),
            "excluded": dict(sorted(self.excluded.items())),
            "total_rows": len(self.rows),
        }

    def verify_consistency(self) -> None:
        """Re-derive the aggregates from the rows; raise on any mismatch."""
        fresh = aggregate(list(self.rows))
        if fresh.aggregates != self.aggregates or fresh.excluded != self.excluded:
            raise MocotError("aggregates do not match recomputation from rows")


def aggregate(rows: Sequence[SampleRow]) -> EvalReport:
    """Mean of each metric over rows where it is present; count exclusions."""
    if not rows:
        raise ValueError("no rows to aggregate")
    aggregates: dict[str, float] = {}
    excluded: dict[str, int] = {}
    for metric in METRIC_FIELDS:
        values = [getattr(row, metric) for row in rows]
        present = [float(v) for v in values if v is not None]
        excluded[_AGGREGATE_NAMES.get(metric, metric)] = len(values) - len(present)
        if present:
            aggregates[_AGGREGATE_NAMES.get(metric, metric)] = sum(present) / len(present)
    if not aggregates:
        raise MocotError("every metric is excluded for every row")
    return EvalReport(tuple(rows), aggregates, excluded)
