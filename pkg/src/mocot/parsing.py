"""Extraction and validation of the structured outputs the pipeline stages emit.

Covers fenced-JSON blocks (with a balanced-brace fallback for models that
drop the fence), REASONING/ANSWER tag pairs, per-stage schemas, option-label
normalization, and the two-line CUES/INTENT template used for open-ended
answers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any

from .errors import (
    ArityError,
    JsonNotObjectError,
    LabelError,
    MissingTagError,
    NoJsonBlockError,
    SchemaError,
    TagStructureError,
)

SUBGOAL_TYPES = ("Visual", "Symbolic", "Narrative")

# Deterministic fallback typing when the planner prompt does not request types.
_SYMBOLIC_KEYWORDS = ("symbol", "metaphor", "represent")
_NARRATIVE_KEYWORDS = ("panel", "story", "sequence", "before-after")

FORBIDDEN_WORDS = ("societal", "norms", "expectations", "resilience", "redemption")
_FORBIDDEN_RE = re.compile(r"\b(" + "|".join(FORBIDDEN_WORDS) + r")\b", re.IGNORECASE)

_FENCE_RE = re.compile(r"```(?:json)?[ \t]*\n(.*?)\n?```", re.DOTALL | re.IGNORECASE)


# --- domain values -----------------------------------------------------------

@dataclass(frozen=True)
class ExtractedJson:
    value: Any
    strategy: str  # "fenced" | "balanced"


@dataclass(frozen=True)
class TaggedOutput:
    reasoning: str
    answer: str


@dataclass(frozen=True)
class SubQuestion:
    text: str
    subgoal_type: str
    type_provenance: str  # "model-declared" | "heuristic"

    def __post_init__(self):
        if not self.text:
            raise SchemaError("sub-question text must be non-empty")
        if self.subgoal_type not in SUBGOAL_TYPES:
            raise SchemaError(f"unknown subgoal type {self.subgoal_type!r}")


@dataclass(frozen=True)
class Plan:
    cot: str
    sub_questions: tuple[SubQuestion, ...]

    def to_dict(self) -> dict:
        # Heuristically typed sub-questions serialize as the plain strings they
        # came from, so parse(to_dict(plan)) reproduces the plan exactly.
        return {
            "cot": self.cot,
            "sub_questions": [
                q.text
                if q.type_provenance == "heuristic"
                else {"text": q.text, "type": q.subgoal_type}
                for q in self.sub_questions
            ],
        }


@dataclass(frozen=True)
class SubResult:
    cot: str
    answer: str

    def to_dict(self) -> dict:
        return {"cot": self.cot, "answer": self.answer}


@dataclass(frozen=True)
class MetaOutput:
    cot1: str  # diagnostic rationale (DTR)
    cot2: str  # final inference rationale (FIR)
    answer: str

    def to_dict(self) -> dict:
        return {"cot1": self.cot1, "cot2": self.cot2, "answer": self.answer}


@dataclass(frozen=True)
class CheckerVerdict:
    matched_answer: str
    is_consistent: bool
    justification: str
    corrected_cot2: str = ""

    def to_dict(self) -> dict:
        return {
            "Matched Answer": self.matched_answer,
            "Is Consistent": self.is_consistent,
            "Justification": self.justification,
            "Corrected CoT2": self.corrected_cot2,
        }


@dataclass(frozen=True)
class CuesIntent:
    cues: tuple[str, ...]
    intent: str
    forbidden: tuple[str, ...] = ()  # forbidden words found in the body, if any


# --- JSON extraction ---------------------------------------------------------

def extract_fenced_json(text: str) -> ExtractedJson:
    """Parse the first fenced JSON block, falling back to a balanced-brace span.

    The fallback scans every '{' with a raw decoder and keeps the largest
    span that parses, which tolerates prefix/suffix prose around the object.
    """
    for match in _FENCE_RE.finditer(text):
        try:
            value = json.loads(match.group(1))
        except json.JSONDecodeError:
            continue
        if not isinstance(value, dict):
            raise JsonNotObjectError(
                f"fenced block parsed to {type(value).__name__}, not an object",
                raw_text=text,
            )
        return ExtractedJson(value, "fenced")

    decoder = json.JSONDecoder()
    best: tuple[int, Any] | None = None
    for start in range(len(text)):
        if text[start] != "{":
            continue
        try:
            value, end = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            continue
        span = end - start
        if best is None or span > best[0]:
            best = (span, value)
    if best is None:
        raise NoJsonBlockError("no parseable JSON block found", raw_text=text)
    if not isinstance(best[1], dict):
        raise JsonNotObjectError(
            f"balanced span parsed to {type(best[1]).__name__}, not an object",
            raw_text=text,
        )
    return ExtractedJson(best[1], "balanced")


# --- tagged output -----------------------------------------------------------

def _find_spans(text: str, tag: str) -> list[tuple[int, int, str]]:
    """All (start, end, body) spans for <TAG>body</TAG>, case-insensitive."""
    pattern = re.compile(rf"<{tag}>(.*?)</{tag}>", re.DOTALL | re.IGNORECASE)
    return [(m.start(), m.end(), m.group(1)) for m in pattern.finditer(text)]


def parse_tagged_output(text: str, mode: str = "lenient") -> TaggedOutput:
    """Extract the first REASONING and ANSWER spans.

    Strict mode additionally requires the document to be exactly one
    REASONING span followed by one ANSWER span, with nothing but whitespace
    around them; lenient mode tolerates extra text and extra spans.
    """
    if mode not in ("lenient", "strict"):
        raise ValueError(f"unknown mode {mode!r}")
    reasoning_spans = _find_spans(text, "REASONING")
    answer_spans = _find_spans(text, "ANSWER")
    if not reasoning_spans:
        raise MissingTagError("missing REASONING span", raw_text=text)
    if not answer_spans:
        raise MissingTagError("missing ANSWER span", raw_text=text)
    if mode == "strict":
        if len(reasoning_spans) != 1 or len(answer_spans) != 1:
            raise TagStructureError("strict mode allows exactly one span per tag", raw_text=text)
        r_start, r_end, r_body = reasoning_spans[0]
        a_start, a_end, a_body = answer_spans[0]
        if a_start < r_end:
            raise TagStructureError("ANSWER must follow REASONING", raw_text=text)
        if text[:r_start].strip() or text[r_end:a_start].strip() or text[a_end:].strip():
            raise TagStructureError("strict mode allows no text outside the spans", raw_text=text)
        if "<reasoning>" in r_body.lower() or "<answer>" in a_body.lower():
            raise TagStructureError("nested tags are not allowed", raw_text=text)
        return TaggedOutput(r_body.strip(), a_body.strip())
    return TaggedOutput(reasoning_spans[0][2].strip(), answer_spans[0][2].strip())


# --- option labels -----------------------------------------------------------

_LABEL_ALONE_RE = re.compile(r"^[\(\[\{]?\s*([A-Za-z])\s*[\)\]\}]?\s*[.,:;]?$")
_LABEL_OPTION_RE = re.compile(r"^option\s*[\(\[]?([A-Za-z])\b", re.IGNORECASE)
_LABEL_PREFIX_RE = re.compile(r"^[\(\[]?([A-Za-z])[\)\].,:;]\s+\S")


def extract_option_letter(raw: str) -> str:
    """Map a surface form like "(b).", "Option C: ..." or "B) text" to a letter."""
    text = raw.strip()
    for pattern in (_LABEL_ALONE_RE, _LABEL_OPTION_RE, _LABEL_PREFIX_RE):
        match = pattern.match(text)
        if match:
            return match.group(1).upper()
    raise LabelError(f"cannot map {raw!r} to an option label", raw_text=raw)


def normalize_option_label(raw: str, options: list[str] | tuple[str, ...]) -> str:
    """Normalize ``raw`` to one of ``options`` (single uppercase letters)."""
    if not options:
        raise ValueError("options must be non-empty")
    label = extract_option_letter(raw)
    if label not in options:
        raise LabelError(f"label {label!r} not among options {list(options)}", raw_text=raw)
    return label


def ensure_option_label(label: str) -> str:
    if not re.fullmatch(r"[A-Z]", label):
        raise LabelError(f"{label!r} is not a single uppercase letter")
    return label


# --- per-stage schemas -------------------------------------------------------

def _require_str(value: dict, key: str, allow_empty: bool = False) -> str:
    if key not in value:
        raise SchemaError(f"missing field {key!r}")
    item = value[key]
    if not isinstance(item, str):
        raise SchemaError(f"field {key!r} must be a string, got {type(item).__name__}")
    if not allow_empty and not item.strip():
        raise SchemaError(f"field {key!r} must be non-empty")
    return item


def classify_subgoal(text: str) -> str:
    """Keyword fallback typing: symbolic cues, then narrative cues, else Visual."""
    lowered = text.lower()
    if any(k in lowered for k in _SYMBOLIC_KEYWORDS):
        return "Symbolic"
    if any(k in lowered for k in _NARRATIVE_KEYWORDS):
        return "Narrative"
    return "Visual"


def parse_plan(value: dict) -> Plan:
    """Validate a planner object: ``cot`` plus 1..4 sub-questions.

    Sub-questions may be plain strings (typed by keyword heuristic) or
    ``{"text", "type"}`` objects from the type-augmented planner prompt.
    """
    if not isinstance(value, dict):
        raise SchemaError(f"plan must be an object, got {type(value).__name__}")
    cot = _require_str(value, "cot")
    if "sub_questions" not in value:
        raise SchemaError("missing field 'sub_questions'")
    raw_subs = value["sub_questions"]
    if not isinstance(raw_subs, list):
        raise SchemaError("'sub_questions' must be a list")
    if not 1 <= len(raw_subs) <= 4:
        raise ArityError(f"expected 1..4 sub-questions, got {len(raw_subs)}")
    subs = []
    for i, item in enumerate(raw_subs):
        if isinstance(item, str):
            if not item.strip():
                raise SchemaError(f"sub-question {i + 1} is empty")
            subs.append(SubQuestion(item, classify_subgoal(item), "heuristic"))
        elif isinstance(item, dict):
            text = _require_str(item, "text")
            declared = _require_str(item, "type").strip().capitalize()
            if declared not in SUBGOAL_TYPES:
                raise SchemaError(f"sub-question {i + 1} has unknown type {item['type']!r}")
            subs.append(SubQuestion(text, declared, "model-declared"))
        else:
            raise SchemaError(f"sub-question {i + 1} must be a string or object")
    return Plan(cot, tuple(subs))


def parse_subresult(value: dict) -> SubResult:
    if not isinstance(value, dict):
        raise SchemaError(f"sub-result must be an object, got {type(value).__name__}")
    return SubResult(_require_str(value, "cot"), _require_str(value, "answer"))


def parse_meta(value: dict) -> MetaOutput:
    if not isinstance(value, dict):
        raise SchemaError(f"meta output must be an object, got {type(value).__name__}")
    return MetaOutput(
        _require_str(value, "cot1"),
        _require_str(value, "cot2"),
        _require_str(value, "answer"),
    )


def parse_verdict(value: dict, options: list[str] | tuple[str, ...] | None = None) -> CheckerVerdict:
    """Validate a checker object (field names carry spaces, as emitted).

    "Corrected CoT2" may be omitted only when the verdict is consistent.
    """
    if not isinstance(value, dict):
        raise SchemaError(f"verdict must be an object, got {type(value).__name__}")
    raw_label = _require_str(value, "Matched Answer")
    if "Is Consistent" not in value:
        raise SchemaError("missing field 'Is Consistent'")
    consistent = value["Is Consistent"]
    if not isinstance(consistent, bool):
        raise SchemaError("field 'Is Consistent' must be a boolean")
    justification = _require_str(value, "Justification", allow_empty=True)
    corrected = value.get("Corrected CoT2", "")
    if not isinstance(corrected, str):
        raise SchemaError("field 'Corrected CoT2' must be a string")
    if not corrected and not consistent:
        raise SchemaError("inconsistent verdict must carry 'Corrected CoT2'")
    if options is not None:
        label = normalize_option_label(raw_label, options)
    else:
        label = extract_option_letter(raw_label)
    return CheckerVerdict(label, consistent, justification, corrected)


# --- CUES / INTENT template ---------------------------------------------------

def find_forbidden_words(text: str) -> tuple[str, ...]:
    """Lowercased forbidden words present in ``text``, deduplicated in order."""
    seen: list[str] = []
    for match in _FORBIDDEN_RE.finditer(text):
        word = match.group(1).lower()
        if word not in seen:
            seen.append(word)
    return tuple(seen)


def parse_cues_intent(text: str) -> CuesIntent:
    """Split a REASONING body into the CUES and INTENT lines.

    Validates 2..4 comma-separated cues and records any forbidden words so
    the format reward can gate on them.
    """
    cues_line = intent_line = None
    for line in text.splitlines():
        stripped = line.strip()
        if cues_line is None and stripped.upper().startswith("CUES:"):
            cues_line = stripped[len("CUES:"):].strip()
        elif intent_line is None and stripped.upper().startswith("INTENT:"):
            intent_line = stripped[len("INTENT:"):].strip()
    if cues_line is None:
        raise SchemaError("missing CUES: line", raw_text=text)
    if intent_line is None:
        raise SchemaError("missing INTENT: line", raw_text=text)
    cues = tuple(c.strip() for c in cues_line.split(",") if c.strip())
    if not 2 <= len(cues) <= 4:
        raise ArityError(f"expected 2..4 cues, got {len(cues)}", raw_text=text)
    if not intent_line:
        raise SchemaError("INTENT line is empty", raw_text=text)
    return CuesIntent(cues, intent_line, find_forbidden_words(text))
