"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class MocotError(Exception):
    """Base class for every error raised by this package."""


# --- backend errors ---------------------------------------------------------

class BackendError(MocotError):
    """Base class for chat-backend failures."""


class NetworkError(BackendError):
    """Connection failure or request timeout (transient)."""


class HttpStatusError(BackendError):
    """Non-2xx HTTP response."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body

    @property
    def transient(self) -> bool:
        return self.status == 429 or 500 <= self.status <= 599


class MalformedResponseError(BackendError):
    """Response body missing choices/content or otherwise unusable."""


class MockMissError(BackendError):
    """Request key has no entry in the mock script."""

    def __init__(self, key: str):
        super().__init__(f"no scripted response for request key {key}")
        self.key = key


class MockExhaustedError(BackendError):
    """Request key was scripted but its entry has already been consumed."""

    def __init__(self, key: str):
        super().__init__(f"scripted response for key {key} already consumed")
        self.key = key


class MockScriptError(BackendError):
    """Mock fixture file failed to parse or validate."""


class RetryExhaustedError(BackendError):
    """All retry attempts failed on transient errors."""

    def __init__(self, attempts: int, last: BaseException):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


# --- parsing errors ---------------------------------------------------------

class ParseError(MocotError):
    """Base class for structured-output parsing failures.

    ``raw_text`` carries the offending model output when available so
    callers can surface it alongside the error.
    """

    def __init__(self, message: str, raw_text: str | None = None):
        super().__init__(message)
        self.raw_text = raw_text


class NoJsonBlockError(ParseError):
    """Neither a fenced block nor a balanced-brace span parsed as JSON."""


class JsonNotObjectError(ParseError):
    """A JSON value parsed but is not an object."""


class MissingTagError(ParseError):
    """A required REASONING/ANSWER span is absent."""


class TagStructureError(ParseError):
    """Strict mode: duplicated/nested tags or extra text outside the spans."""


class SchemaError(ParseError):
    """A stage/judge object is missing a field or a field is ill-typed."""


class ArityError(ParseError):
    """A list field is outside its allowed size range."""


class LabelError(ParseError):
    """An answer string cannot be mapped to a permitted option label."""


# --- pipeline / evaluation errors -------------------------------------------

class StageError(MocotError):
    """Pipeline stage failure, tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class JudgeParseError(MocotError):
    """A judge response could not be parsed into the expected record."""

    def __init__(self, message: str, raw_text: str | None = None):
        super().__init__(message)
        self.raw_text = raw_text


class DatasetError(MocotError):
    """Dataset file violates the JSONL schema."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(MocotError):
    """Run configuration is invalid or incomplete."""


class EnumerationError(MocotError):
    """Exact enumeration requested for a space above the feasibility cutoff."""


class SupportMismatchError(MocotError):
    """KL divergence undefined: mass outside the reference support."""
