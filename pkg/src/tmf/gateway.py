"""Uniform chat-completion interface with retries and transcript capture.

Two providers: a remote OpenAI-compatible HTTP endpoint, and a scripted
provider that answers from substring-matched canned rules so whole pipeline
runs are byte-reproducible in tests and offline mode.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from tmf.errors import ProviderError, ValidationError

logger = logging.getLogger(__name__)

# Persona preamble used for asset-centric analysis sessions.
ANALYST_PERSONA = "You are an expert-level cybersecurity analyst."


class Timeout(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class HttpError(ProviderError):
    pass


class EmptyResponse(ProviderError):
    pass


class UnmatchedPrompt(ProviderError):
    """Scripted provider received a prompt no rule matches (closed-world test mode)."""


@dataclass(frozen=True)
class CompletionRequest:
    user_text: str
    system_text: str | None = None
    temperature: float = 0.0
    max_tokens: int = 2048
    model_tag: str = "default"

    def __post_init__(self) -> None:
        if not self.user_text.strip():
            raise ValidationError("user_text must be non-empty")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    provider_tag: str
    latency_ms: int


class Provider(Protocol):
    tag: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


@dataclass(frozen=True)
class ScriptRule:
    match: str
    response: str


class ScriptedProvider:
    """Deterministic provider: first rule whose substring matches the prompt wins."""

    tag = "scripted"

    def __init__(self, rules: list[ScriptRule]):
        self.rules = list(rules)
        self.call_log: list[tuple[str, str]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([ScriptRule(match=e["match"], response=e["response"]) for e in entries])

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        start = time.perf_counter()
        for rule in self.rules:
            if rule.match in request.user_text:
                self.call_log.append((request.user_text, rule.response))
                latency = int((time.perf_counter() - start) * 1000)
                return CompletionResponse(
                    text=rule.response, provider_tag=self.tag, latency_ms=latency
                )
        raise UnmatchedPrompt(
            f"no scripted rule matches prompt starting {request.user_text[:80]!r}"
        )


class OpenAICompatProvider:
    """POST to an OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(self, base_url: str, api_key: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.tag = f"openai-compat:{self.base_url}"

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        import requests

        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        body = {
            "model": request.model_tag,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        start = time.perf_counter()
        try:
            response = requests.post(
                f"{self.base_url}/chat/completions",
                headers={
                    "Authorization": f"Bearer {self.api_key}",
                    "Content-Type": "application/json",
                },
                json=body,
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise Timeout(f"chat completion timed out after {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise HttpError(f"chat completion request failed: {exc}") from exc
        latency = int((time.perf_counter() - start) * 1000)
        if response.status_code == 429:
            raise RateLimited("chat completion endpoint returned HTTP 429")
        if response.status_code != 200:
            raise HttpError(f"chat completion endpoint returned HTTP {response.status_code}")
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise HttpError(f"malformed chat completion payload: {exc}") from exc
        if not (text or "").strip():
            raise EmptyResponse("chat completion returned empty text")
        return CompletionResponse(text=text, provider_tag=self.tag, latency_ms=latency)


@dataclass(frozen=True)
class RetryPolicy:
    """Total attempts and the sleeps between them; only timeouts and rate
    limits are retried."""

    attempts: int = 3
    backoff_seconds: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValidationError("attempts must be >= 1")


class Gateway:
    """Wraps a provider with retry handling and a run transcript.

    Every ``complete()`` call appends exactly one (prompt, response-or-error)
    pair to ``transcript``, regardless of how many retry attempts it took.
    """

    def __init__(self, provider: Provider, retry: RetryPolicy | None = None,
                 system_text: str | None = None):
        self.provider = provider
        self.retry = retry or RetryPolicy()
        self.system_text = system_text
        self.transcript: list[tuple[str, str]] = []
        self.retry_events: list[str] = []

    def complete(self, user_text: str, *, temperature: float = 0.0,
                 max_tokens: int = 2048, model_tag: str = "default") -> CompletionResponse:
        request = CompletionRequest(
            user_text=user_text,
            system_text=self.system_text,
            temperature=temperature,
            max_tokens=max_tokens,
            model_tag=model_tag,
        )
        last_error: ProviderError | None = None
        for attempt in range(self.retry.attempts):
            try:
                response = self.provider.complete(request)
            except (Timeout, RateLimited) as exc:
                last_error = exc
                if attempt + 1 < self.retry.attempts:
                    delay = self.retry.backoff_seconds[
                        min(attempt, len(self.retry.backoff_seconds) - 1)
                    ]
                    self.retry_events.append(f"attempt {attempt + 1}: {exc}; retrying in {delay}s")
                    logger.warning("provider error (%s); retrying in %.1fs", exc, delay)
                    time.sleep(delay)
                continue
            except ProviderError as exc:
                self.transcript.append((user_text, f"ERROR: {exc}"))
                raise
            self.transcript.append((user_text, response.text))
            return response
        assert last_error is not None
        self.transcript.append((user_text, f"ERROR: {last_error}"))
        raise last_error
