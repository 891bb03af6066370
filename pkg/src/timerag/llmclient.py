"""Chat-completion and embedding clients, plus the deterministic mocks the
test suite and hermetic CLI runs rely on."""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import (
    ClassifierParseError,
    ClientError,
    ClientTimeout,
    MockScriptError,
)

ENV_ENDPOINT = "TIMERAG_LLM_ENDPOINT"
ENV_API_KEY = "TIMERAG_LLM_API_KEY"
ENV_MODEL = "TIMERAG_LLM_MODEL"


@dataclass
class ChatRequest:
    messages: list[dict]  # {"role": system|user|assistant, "content": str}
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not any(m.get("role") == "user" for m in self.messages):
            raise ValueError("chat request needs at least one user message")


@dataclass
class ChatResponse:
    content: str
    finish_reason: str = "stop"


class ChatClient(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...


class HttpChatClient:
    """JSON chat-completion transport with bounded exponential-backoff retries."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        transport: Callable | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        self.api_key = api_key or os.environ.get(ENV_API_KEY)
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.transport = transport or self._requests_transport
        self.sleep = sleep
        if self.endpoint is None:
            raise ClientError(f"no endpoint configured; set {ENV_ENDPOINT}")

    def _requests_transport(self, url: str, payload: dict, headers: dict, timeout: float):
        import requests

        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.Timeout as exc:
            raise ClientTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise ClientError(str(exc)) from exc
        return resp.status_code, resp.text

    def chat(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                status, body = self.transport(self.endpoint, payload, headers, self.timeout)
            except ClientTimeout:
                raise
            except ClientError as exc:
                last_error = exc
                self.sleep(self.backoff_base * (2**attempt))
                continue
            if 200 <= status < 300:
                return self._parse_body(body)
            if status in (429,) or status >= 500:
                last_error = ClientError(f"transient HTTP {status}")
                self.sleep(self.backoff_base * (2**attempt))
                continue
            raise ClientError(f"HTTP {status}: {body[:200]}")
        raise ClientError(f"request failed after {self.max_retries} attempts: {last_error}")

    @staticmethod
    def _parse_body(body: str) -> ChatResponse:
        try:
            data = json.loads(body)
            choice = data["choices"][0]
            return ChatResponse(
                content=choice["message"]["content"],
                finish_reason=choice.get("finish_reason", "stop"),
            )
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ClientError(f"malformed chat response: {exc}") from exc


def request_content_key(messages: list[dict]) -> str:
    """Stable hash of a message list, for keyed mock scripts."""
    h = hashlib.sha256()
    for m in messages:
        h.update(m.get("role", "").encode("utf-8"))
        h.update(b"\x00")
        h.update(m.get("content", "").encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()


class MockChatClient:
    """Scripted chat client: either an ordered response list or a map keyed
    by request-content hash. Exhausting an ordered script is a test error."""

    def __init__(self, script: list[str] | dict[str, str]):
        if isinstance(script, dict):
            self._keyed = dict(script)
            self._ordered = None
        else:
            self._keyed = None
            self._ordered = list(script)
        self.requests: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        if self._ordered is not None:
            if not self._ordered:
                raise MockScriptError("ordered mock script exhausted")
            return ChatResponse(self._ordered.pop(0))
        key = request_content_key(request.messages)
        if key not in self._keyed:
            raise MockScriptError(f"no scripted response for request key {key[:12]}")
        return ChatResponse(self._keyed[key])


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _FNV_MASK
    return h


def embed_text(text: str, d_e: int = 32) -> np.ndarray:
    """Feature-hashing bag-of-tokens embedder.

    Lowercase, whitespace-split; each token's 64-bit FNV-1a hash picks a
    bucket (h mod d_e) and a sign (bit 0), accumulated then L2-normalized.
    Deterministic and order-invariant by construction.
    """
    tokens = text.lower().split()
    if not tokens:
        raise ValueError("cannot embed empty text")
    vec = np.zeros(d_e)
    for token in tokens:
        h = _fnv1a64(token.encode("utf-8"))
        sign = 1.0 if (h & 1) == 0 else -1.0
        vec[h % d_e] += sign
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("text hashed to the zero vector")
    return vec / norm


class HashingEmbedder:
    def __init__(self, d_e: int = 32):
        self.d_e = d_e

    def __call__(self, text: str) -> np.ndarray:
        return embed_text(text, self.d_e)


_YES_NO = re.compile(r"\s*(yes|no)\b", re.IGNORECASE)


def classify_binary(client: ChatClient, text: str, instruction: str) -> bool:
    """Yes/no classification via chat; the reply must lead with yes or no."""
    request = ChatRequest(
        messages=[
            {"role": "system", "content": instruction + " Answer only 'yes' or 'no'."},
            {"role": "user", "content": text},
        ]
    )
    response = client.chat(request)
    m = _YES_NO.match(response.content)
    if m is None:
        raise ClassifierParseError(f"expected yes/no, got {response.content[:80]!r}")
    return m.group(1).lower() == "yes"
