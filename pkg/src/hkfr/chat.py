"""Minimal OpenAI-compatible chat-completions client with bounded retries."""

from __future__ import annotations

import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Callable

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "HKFR_API_KEY"
MAX_RETRIES = 3
BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    pass


class BackendRejected(BackendError):
    def __init__(self, status: int, body_excerpt: str) -> None:
        super().__init__(f"backend rejected request with HTTP {status}: {body_excerpt}")
        self.status = status
        self.body_excerpt = body_excerpt


class ProtocolError(BackendError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
        }


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str


def backoff_delay(attempt: int, rng: random.Random | None = None) -> float:
    """Full-jitter delay before retry number ``attempt`` (0-based)."""
    cap = BACKOFF_BASE_S * BACKOFF_FACTOR**attempt
    return (rng or random).uniform(0.0, cap)


def _parse_response(resp: httpx.Response) -> ChatResponse:
    try:
        payload = resp.json()
        choice = payload["choices"][0]
        content = choice["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed chat response: {resp.text[:200]!r}") from exc
    if not isinstance(content, str):
        raise ProtocolError("chat response content is not a string")
    return ChatResponse(content=content, finish_reason=str(choice.get("finish_reason") or ""))


def chat(
    endpoint: str,
    request: ChatRequest,
    api_key: str | None = None,
    *,
    timeout: float = 60.0,
    max_retries: int = MAX_RETRIES,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> ChatResponse:
    """POST ``request`` to ``{endpoint}/v1/chat/completions``.

    429 and 5xx responses and transport failures are retried up to
    ``max_retries`` times; other 4xx responses fail immediately.
    """
    url = endpoint.rstrip("/") + "/v1/chat/completions"
    key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
    headers = {"Content-Type": "application/json"}
    if key:
        headers["Authorization"] = f"Bearer {key}"

    own_client = client is None
    client = client or httpx.Client(timeout=timeout)
    last_error = ""
    try:
        for attempt in range(max_retries + 1):
            if attempt:
                sleep(backoff_delay(attempt - 1, rng))
            try:
                resp = client.post(url, json=request.body(), headers=headers)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("chat attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code == 200:
                return _parse_response(resp)
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("chat attempt %d got %s", attempt + 1, last_error)
                continue
            raise BackendRejected(resp.status_code, resp.text[:200])
    finally:
        if own_client:
            client.close()
    raise BackendUnavailable(f"{url} unavailable after {max_retries + 1} attempts ({last_error})")
