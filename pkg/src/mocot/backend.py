"""Uniform chat-completion backend: OpenAI-compatible HTTP client and scripted mock.

Both backends speak the same message model, so every stage of the pipeline
(and every test fixture) goes through one request shape. Mock fixtures are
keyed by a SHA-256 of the canonicalized message list, which makes them
independent of serialization whitespace.
"""

from __future__ import annotations

import base64
import hashlib
import json
import mimetypes
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
import requests

from .errors import (
    HttpStatusError,
    MalformedResponseError,
    MockExhaustedError,
    MockMissError,
    MockScriptError,
    NetworkError,
    RetryExhaustedError,
)

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "error")


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image by file path, base64 payload, or URL."""

    source: str  # "file-path" | "base64-payload" | "url"
    value: str
    media_type: str = "image/png"

    def __post_init__(self):
        if self.source not in ("file-path", "base64-payload", "url"):
            raise ValueError(f"unknown image source {self.source!r}")
        if not self.media_type.startswith("image/"):
            raise ValueError(f"{self.media_type!r} is not an image media type")
        if self.source == "base64-payload":
            try:
                base64.b64decode(self.value, validate=True)
            except Exception as exc:
                raise ValueError(f"invalid base64 payload: {exc}") from exc

    @classmethod
    def from_path(cls, path: str | Path) -> "ImageRef":
        media = mimetypes.guess_type(str(path))[0] or "image/png"
        return cls("file-path", str(path), media)

    def as_data_url(self) -> str:
        """Resolve to a data URL (or pass a plain URL through)."""
        if self.source == "url":
            return self.value
        if self.source == "base64-payload":
            payload = self.value
        else:
            payload = base64.b64encode(Path(self.value).read_bytes()).decode("ascii")
        return f"data:{self.media_type};base64,{payload}"


@dataclass(frozen=True)
class ContentPart:
    """One message part: text or an image, never both."""

    kind: str  # "text" | "image"
    text: str | None = None
    image: ImageRef | None = None

    def __post_init__(self):
        if self.kind == "text":
            if self.text is None or self.image is not None:
                raise ValueError("text part must carry text only")
        elif self.kind == "image":
            if self.image is None or self.text is not None:
                raise ValueError("image part must carry an image only")
        else:
            raise ValueError(f"unknown part kind {self.kind!r}")

    @classmethod
    def from_text(cls, text: str) -> "ContentPart":
        return cls("text", text=text)

    @classmethod
    def from_image(cls, image: ImageRef) -> "ContentPart":
        return cls("image", image=image)


@dataclass(frozen=True)
class ChatMessage:
    """A chat turn with one or more ordered content parts."""

    role: str
    parts: tuple[ContentPart, ...]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.parts:
            raise ValueError("message needs at least one part")
        if self.role == "system" and any(p.kind != "text" for p in self.parts):
            raise ValueError("system messages may contain only text parts")

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role, (ContentPart.from_text(text),))

    @classmethod
    def user(cls, *parts: ContentPart) -> "ChatMessage":
        return cls("user", tuple(parts))


@dataclass(frozen=True)
class BackendConfig:
    """How to reach one model: live HTTP endpoint or a scripted mock."""

    kind: str = "http-openai-compatible"  # or "scripted-mock"
    endpoint: str = ""
    model_name: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 1024
    api_key_env_var: str = ""
    mock_script: str | None = None

    def __post_init__(self):
        if self.kind not in ("http-openai-compatible", "scripted-mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        if self.kind == "http-openai-compatible" and not self.endpoint:
            raise ValueError("http backend needs an endpoint")
        if self.kind == "scripted-mock" and not self.mock_script:
            raise ValueError("scripted-mock backend needs a mock_script path")


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential-backoff retry policy for transient backend failures."""

    max_attempts: int = 3
    base_delay: float = 0.5
    backoff_multiplier: float = 2.0
    request_timeout: float = 60.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_multiplier < 1:
            raise ValueError("backoff_multiplier must be >= 1")

    def delay_before(self, attempt: int) -> float:
        """Sleep before retrying; ``attempt`` is the 1-based failed attempt."""
        return self.base_delay * self.backoff_multiplier ** (attempt - 1)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: dict[str, int] | None = None

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish reason {self.finish_reason!r}")
        if self.finish_reason == "stop" and not self.text:
            raise ValueError("stop response must carry text")


@dataclass
class RetryRecord:
    """Out-param capturing how many attempts a retried call consumed."""

    attempts: int = 0


# --- wire schema -------------------------------------------------------------

def encode_messages(messages: list[ChatMessage] | tuple[ChatMessage, ...]) -> list[dict]:
    """Encode messages to the OpenAI-compatible chat schema.

    A message with exactly one text part compacts to string content; anything
    else becomes a content-part list with images carried as (data-)URLs.
    """
    wire = []
    for msg in messages:
        if len(msg.parts) == 1 and msg.parts[0].kind == "text":
            wire.append({"role": msg.role, "content": msg.parts[0].text})
            continue
        content = []
        for part in msg.parts:
            if part.kind == "text":
                content.append({"type": "text", "text": part.text})
            else:
                content.append(
                    {"type": "image_url", "image_url": {"url": part.image.as_data_url()}}
                )
        wire.append({"role": msg.role, "content": content})
    return wire


def decode_messages(wire: list[dict]) -> list[ChatMessage]:
    """Invert :func:`encode_messages`.

    Data URLs decode to base64-payload refs and plain URLs to url refs, so a
    round trip is structurally equal for url/base64 images (a file-path image
    is normalized to its base64 payload on encode).
    """
    messages = []
    for item in wire:
        content = item["content"]
        if isinstance(content, str):
            messages.append(ChatMessage.text(item["role"], content))
            continue
        parts = []
        for entry in content:
            if entry["type"] == "text":
                parts.append(ContentPart.from_text(entry["text"]))
            elif entry["type"] == "image_url":
                url = entry["image_url"]["url"]
                if url.startswith("data:"):
                    header, _, payload = url.partition(",")
                    media = header[len("data:"):].split(";")[0] or "image/png"
                    parts.append(ContentPart.from_image(ImageRef("base64-payload", payload, media)))
                else:
                    parts.append(ContentPart.from_image(ImageRef("url", url)))
            else:
                raise MalformedResponseError(f"unknown content part type {entry.get('type')!r}")
        messages.append(ChatMessage(item["role"], tuple(parts)))
    return messages


def canonical_request_key(messages: list[ChatMessage] | tuple[ChatMessage, ...]) -> str:
    """SHA-256 over roles and part contents; image parts contribute their source value."""
    canon = []
    for msg in messages:
        parts = []
        for part in msg.parts:
            if part.kind == "text":
                parts.append({"text": part.text})
            else:
                parts.append({"image": part.image.value})
        canon.append({"role": msg.role, "parts": parts})
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- backends ----------------------------------------------------------------

class Backend(ABC):
    """A shareable handle that turns a message list into a ChatResponse."""

    @abstractmethod
    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        raise NotImplementedError

    def complete_with_retry(
        self,
        messages: list[ChatMessage],
        policy: RetryPolicy,
        record: RetryRecord | None = None,
    ) -> ChatResponse:
        """Retry transient failures with exponential backoff.

        Transient set: connect/timeout errors, HTTP 429, HTTP 5xx. Anything
        else propagates immediately after a single attempt.
        """
        last: BaseException | None = None
        for attempt in range(1, policy.max_attempts + 1):
            if record is not None:
                record.attempts = attempt
            try:
                return self.complete(messages)
            except NetworkError as exc:
                last = exc
            except HttpStatusError as exc:
                if not exc.transient:
                    raise
                last = exc
            if attempt < policy.max_attempts:
                time.sleep(policy.delay_before(attempt))
        raise RetryExhaustedError(policy.max_attempts, last)


class HttpBackend(Backend):
    """POSTs to ``{endpoint}/chat/completions`` with bearer auth from the env."""

    def __init__(self, config: BackendConfig, timeout: float = 60.0, session=None):
        if config.kind != "http-openai-compatible":
            raise ValueError("HttpBackend needs an http-openai-compatible config")
        self.config = config
        self.timeout = timeout
        self._session = session or requests.Session()

    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        if not messages:
            raise ValueError("messages must be non-empty")
        payload = {
            "model": self.config.model_name,
            "messages": encode_messages(messages),
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env_var:
            key = os.environ.get(self.config.api_key_env_var, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        try:
            resp = self._session.post(url, json=payload, headers=headers, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise NetworkError(str(exc)) from exc
        if not 200 <= resp.status_code < 300:
            raise HttpStatusError(resp.status_code, resp.text)
        try:
            body = resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"response is not JSON: {exc}") from exc
        choices = body.get("choices")
        if not choices:
            raise MalformedResponseError("response has no choices")
        first = choices[0]
        text = (first.get("message") or {}).get("content")
        if not isinstance(text, str) or not text:
            raise MalformedResponseError("first choice has no message content")
        finish = first.get("finish_reason") or "stop"
        if finish not in FINISH_REASONS:
            finish = "stop"
        usage = body.get("usage")
        if usage is not None:
            usage = {k: v for k, v in usage.items() if isinstance(v, int)}
        return ChatResponse(text=text, finish_reason=finish, usage=usage)


class ScriptedMockBackend(Backend):
    """Deterministic replay of keyed responses; each entry is consumed once.

    The cursor state is guarded by a lock so concurrent workers replaying a
    keyed script still observe exactly-once consumption.
    """

    def __init__(self, entries: list[dict]):
        self._responses: dict[str, ChatResponse] = {}
        for i, entry in enumerate(entries):
            key = entry.get("key")
            if not isinstance(key, str):
                raise MockScriptError(f"entry {i}: missing or non-string key")
            if key in self._responses:
                raise MockScriptError(f"duplicate key {key}")
            if not isinstance(entry.get("response"), str):
                raise MockScriptError(f"entry {i}: missing response text")
            finish = entry.get("finish_reason", "stop")
            self._responses[key] = ChatResponse(entry["response"], finish)
        self._consumed: set[str] = set()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._responses)

    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        if not messages:
            raise ValueError("messages must be non-empty")
        key = canonical_request_key(messages)
        with self._lock:
            if key not in self._responses:
                raise MockMissError(key)
            if key in self._consumed:
                raise MockExhaustedError(key)
            self._consumed.add(key)
            return self._responses[key]


class RecordingBackend(Backend):
    """Wraps a backend and appends one transcript row per call."""

    def __init__(self, inner: Backend, stage: str, sink: list[dict]):
        self.inner = inner
        self.stage = stage
        self.sink = sink
        self._lock = threading.Lock()

    def complete(self, messages: list[ChatMessage]) -> ChatResponse:
        key = canonical_request_key(messages)
        start = time.monotonic()
        response = self.inner.complete(messages)
        row = {
            "stage": self.stage,
            "request_key": key,
            "response": response.text,
            "latency_ms": round((time.monotonic() - start) * 1000.0, 3),
        }
        with self._lock:
            self.sink.append(row)
        return response


def load_mock_script(path: str | Path) -> ScriptedMockBackend:
    """Load a fixture file: a JSON array of {key, response, finish_reason}."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        entries = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MockScriptError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(entries, list):
        raise MockScriptError(f"{path}: fixture must be a JSON array")
    return ScriptedMockBackend(entries)


def write_mock_script(path: str | Path, entries: list[dict]) -> None:
    Path(path).write_text(
        json.dumps(entries, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def build_backend(config: BackendConfig, timeout: float = 60.0) -> Backend:
    """Instantiate the backend a config describes."""
    if config.kind == "scripted-mock":
        return load_mock_script(config.mock_script)
    return HttpBackend(config, timeout=timeout)


def complete(messages: list[ChatMessage], config: BackendConfig) -> ChatResponse:
    """One-shot completion against a freshly built backend."""
    if not messages:
        raise ValueError("messages must be non-empty")
    return build_backend(config).complete(messages)


def complete_with_retry(
    messages: list[ChatMessage],
    config: BackendConfig,
    policy: RetryPolicy,
    record: RetryRecord | None = None,
) -> ChatResponse:
    """One-shot completion with the retry policy applied."""
    if not messages:
        raise ValueError("messages must be non-empty")
    backend = build_backend(config, timeout=policy.request_timeout)
    return backend.complete_with_retry(messages, policy, record)
