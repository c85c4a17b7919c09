"""
Backend abstraction for the single language model used by every module.

``HttpChatBackend`` talks to a chat-completion endpoint over ``requests``;
``oracle_backend.OracleBackend`` is the scripted stand-in used offline.
Both record token usage in a thread-safe ``UsageLedger``.
"""

import copy
import logging
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Protocol

import requests

from config import API_KEY_ENV, HttpConfig, get_env_var
from errors import (
    MalformedProviderReply,
    RateLimited,
    RequestOutOfBounds,
    RequestRejected,
    TransportError,
)

logger = logging.getLogger(__name__)

MIN_TEMPERATURE, MAX_TEMPERATURE = 0.05, 2.0


class RequestKind(str, Enum):
    FORMAT = "format"
    EVAL_INFO = "eval_info"
    EVALUATE = "evaluate"
    CLASSIFY = "classify"
    GENERATE = "generate"


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    kind: RequestKind
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 1024

    def validate(self) -> None:
        if not MIN_TEMPERATURE <= self.temperature <= MAX_TEMPERATURE:
            raise RequestOutOfBounds(
                f"temperature {self.temperature} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )
        if not 0.0 < self.top_p <= 1.0:
            raise RequestOutOfBounds(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens < 1:
            raise RequestOutOfBounds(f"max_tokens must be positive, got {self.max_tokens}")
        if not self.prompt:
            raise RequestOutOfBounds("prompt is empty")


@dataclass(frozen=True)
class LlmResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


def count_tokens(text: str) -> int:
    """Whitespace token count used for offline accounting."""
    return len(text.split())


class UsageLedger:
    """Cumulative prompt/completion tokens per request kind plus an access count."""

    def __init__(self):
        self._lock = threading.Lock()
        self._kinds: Dict[str, Dict[str, int]] = {
            kind.value: {"requests": 0, "prompt_tokens": 0, "completion_tokens": 0}
            for kind in RequestKind
        }

    def record(self, kind: RequestKind, prompt_tokens: int, completion_tokens: int) -> None:
        with self._lock:
            entry = self._kinds[RequestKind(kind).value]
            entry["requests"] += 1
            entry["prompt_tokens"] += prompt_tokens
            entry["completion_tokens"] += completion_tokens

    def merge(self, other: "UsageLedger") -> None:
        for kind, entry in other.by_kind().items():
            with self._lock:
                for key, value in entry.items():
                    self._kinds[kind][key] += value

    def by_kind(self) -> Dict[str, Dict[str, int]]:
        with self._lock:
            return copy.deepcopy(self._kinds)

    @property
    def access_count(self) -> int:
        return sum(entry["requests"] for entry in self.by_kind().values())

    @property
    def prompt_tokens(self) -> int:
        return sum(entry["prompt_tokens"] for entry in self.by_kind().values())

    @property
    def completion_tokens(self) -> int:
        return sum(entry["completion_tokens"] for entry in self.by_kind().values())

    def snapshot(self) -> "UsageLedger":
        clone = UsageLedger()
        clone.merge(self)
        return clone

    def to_dict(self) -> Dict[str, Any]:
        return {
            "access_count": self.access_count,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "by_kind": self.by_kind(),
        }


class LlmBackend(Protocol):
    ledger: UsageLedger

    def complete(self, req: LlmRequest) -> LlmResponse:
        ...


class HttpChatBackend:
    """Chat-completion client for any endpoint speaking the common JSON schema."""

    def __init__(self, config: Optional[HttpConfig] = None, api_key: Optional[str] = None,
                 session: Optional[requests.Session] = None):
        self.config = config or HttpConfig()
        self.api_key = api_key or get_env_var(API_KEY_ENV)
        self.session = session or requests.Session()
        self.ledger = UsageLedger()
        logger.info(f"HTTP backend ready: {self.config.base_url} model={self.config.model}")

    def _post(self, path: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        """POST with exponential backoff on transport errors, 5xx and 429."""
        url = f"{self.config.base_url.rstrip('/')}/{path}"
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        retries = self.config.max_retries
        last_error: Optional[Exception] = None
        for attempt in range(retries + 1):
            try:
                response = self.session.post(url, json=payload, headers=headers, timeout=self.config.timeout)
            except requests.exceptions.RequestException as e:
                last_error = TransportError(f"Request to {url} failed: {e}")
                logger.warning(f"Transport error, attempt {attempt + 1}/{retries + 1}: {e}")
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as e:
                        raise MalformedProviderReply(f"Reply from {url} is not JSON: {e}") from e
                if response.status_code == 429:
                    last_error = RateLimited(f"Rate limited by {url}")
                    logger.warning(f"Rate limit hit. Attempt {attempt + 1}/{retries + 1}")
                elif response.status_code >= 500:
                    last_error = TransportError(f"Server error {response.status_code} from {url}")
                    logger.warning(f"Server error {response.status_code}. Attempt {attempt + 1}/{retries + 1}")
                else:
                    logger.error(f"Request rejected with status {response.status_code}: {response.text[:200]}")
                    raise RequestRejected(f"Status {response.status_code} from {url}")
            if attempt < retries:
                time.sleep(self.config.backoff * (2 ** attempt))
        logger.error(f"Giving up on {url} after {retries + 1} attempts")
        raise last_error

    def complete(self, req: LlmRequest) -> LlmResponse:
        req.validate()
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        }
        data = self._post("chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"]
            usage = data["usage"]
            prompt_tokens = int(usage["prompt_tokens"])
            completion_tokens = int(usage["completion_tokens"])
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise MalformedProviderReply(f"Chat reply missing fields: {e}") from e
        if not text or not text.strip():
            raise MalformedProviderReply("Chat reply has empty content")
        self.ledger.record(req.kind, prompt_tokens, completion_tokens)
        logger.debug(f"{req.kind.value} call: {prompt_tokens} prompt / {completion_tokens} completion tokens")
        return LlmResponse(text, prompt_tokens, completion_tokens)

    def embed(self, text: str) -> List[float]:
        data = self._post("embeddings", {"model": self.config.embedding_model, "input": text})
        try:
            return [float(x) for x in data["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise MalformedProviderReply(f"Embedding reply missing fields: {e}") from e


class MeteredBackend:
    """Per-episode view of a shared backend with its own ledger."""

    def __init__(self, inner: LlmBackend):
        self.inner = inner
        self.ledger = UsageLedger()

    def complete(self, req: LlmRequest) -> LlmResponse:
        response = self.inner.complete(req)
        self.ledger.record(req.kind, response.prompt_tokens, response.completion_tokens)
        return response


def complete(backend: LlmBackend, req: LlmRequest) -> LlmResponse:
    """Validate, dispatch and check the reply of one request."""
    req.validate()
    response = backend.complete(req)
    if not response.text or not response.text.strip():
        raise MalformedProviderReply(f"Empty {req.kind.value} reply")
    if response.prompt_tokens < 0 or response.completion_tokens < 0:
        raise MalformedProviderReply("Negative token counts")
    return response


def usage_report(backend: LlmBackend) -> UsageLedger:
    return backend.ledger.snapshot()
