"""Model backends: a deterministic rule-based mock and an HTTP chat backend.

The mock never reads the prompt for fusion; it rebuilds the summary from
locally computed facets, which makes it the reference oracle for the
pipeline.  For recommendation it ranks catalog candidates from facets (full
variant) or by mention recency in the raw behavior text (no_hkf).
"""

from __future__ import annotations

from typing import Mapping, Sequence

import httpx

from .catalog import Catalog, default_catalog
from .chat import ChatMessage, ChatRequest, chat
from .fusion import Facets, summary_text
from .recommender import RecommendContext, mock_answer


class MockBackend:
    backend_id = "mock"
    deterministic = True

    def __init__(self, model_name: str = "hkfr-mock", catalog: Catalog | None = None) -> None:
        self.model_name = model_name
        self.catalog = catalog or default_catalog()

    def fusion_text(self, messages: Sequence[ChatMessage], facets: Facets, names: Mapping[str, str]) -> str:
        return summary_text(facets, names)

    def recommend_text(self, prompt: str, context: RecommendContext) -> str:
        return mock_answer(context, self.catalog)


class HttpBackend:
    backend_id = "http"
    deterministic = False

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        **chat_options,
    ) -> None:
        if not endpoint:
            raise ValueError("http backend requires an endpoint")
        self.endpoint = endpoint
        self.model_name = model_name
        self.api_key = api_key
        self.timeout = timeout
        self.chat_options = chat_options
        # one pooled client for all threads; building a client per call
        # reloads the TLS context every time
        self._client = httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        request = ChatRequest(model=self.model_name, messages=tuple(messages), temperature=0.0)
        return chat(self.endpoint, request, self.api_key, client=self._client, **self.chat_options).content

    def fusion_text(self, messages: Sequence[ChatMessage], facets: Facets, names: Mapping[str, str]) -> str:
        return self.complete(messages)

    def recommend_text(self, prompt: str, context: RecommendContext) -> str:
        return self.complete([ChatMessage("user", prompt)])


def make_backend(kind: str, model_name: str, endpoint: str | None = None, catalog: Catalog | None = None):
    if kind == "mock":
        return MockBackend(model_name, catalog)
    if kind == "http":
        return HttpBackend(endpoint or "", model_name)
    raise ValueError(f"unknown backend kind {kind!r}")
