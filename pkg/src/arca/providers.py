"""Language-model provider plumbing.

Chat providers are text-in/text-out. The HTTP implementation keeps the
wire schema isolated here; nothing else in the package sees it. Every
provider call made during a query is tracked as a CallRecord so plans
can carry full provenance and cost reports stay honest.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

from .errors import ProviderUnavailable, TransientProviderError


def estimate_tokens(text: str, chars_per_token: int = 4) -> int:
    """Heuristic token count used when no provider tokenizer exists."""
    if not text:
        return 0
    return math.ceil(len(text) / chars_per_token)


@dataclass(frozen=True)
class ChatResult:
    text: str
    tokens_in: int = 0
    tokens_out: int = 0


@dataclass
class CallRecord:
    """One provider interaction (or its offline stand-in)."""

    stage: str
    provider_tag: str
    tokens_in: int = 0
    tokens_out: int = 0
    elapsed: float = 0.0
    remote: bool = False
    note: str = ""


@runtime_checkable
class ChatProvider(Protocol):
    tag: str

    def complete(self, prompt: str) -> ChatResult: ...


def call_with_retries(
    fn: Callable[[], object],
    max_attempts: int = 3,
    base_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
):
    """Retry fn with exponential backoff on transient provider failures."""
    last: Exception | None = None
    for attempt in range(max_attempts):
        try:
            return fn()
        except TransientProviderError as exc:
            last = exc
            if attempt + 1 < max_attempts:
                sleep(base_delay * (2**attempt))
    raise ProviderUnavailable(
        f"provider still failing after {max_attempts} attempts: {last}"
    ) from last


def _default_post(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    try:
        response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    except requests.RequestException as exc:
        raise TransientProviderError(f"request to {url} failed: {exc}") from exc
    if response.status_code == 429 or response.status_code >= 500:
        raise TransientProviderError(f"{url} returned HTTP {response.status_code}")
    if response.status_code >= 400:
        raise ProviderUnavailable(
            f"{url} returned HTTP {response.status_code}: {response.text[:200]}"
        )
    return response.json()


class HttpChatProvider:
    """Chat-completions style HTTP provider.

    The API key is read from the named environment variable at call time;
    ``post_fn`` is injectable so tests can run without a network.
    """

    remote = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "ARCA_API_KEY",
        max_attempts: int = 3,
        timeout: float = 60.0,
        post_fn: Callable[..., dict] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.max_attempts = max_attempts
        self.timeout = timeout
        self.post_fn = post_fn or _default_post
        self.sleep = sleep
        self.tag = f"http-chat({model})"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: str) -> ChatResult:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }

        def attempt():
            return self.post_fn(self.endpoint, payload, self._headers(), self.timeout)

        body = call_with_retries(
            attempt, max_attempts=self.max_attempts, sleep=self.sleep
        )
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"malformed chat response: {exc}") from exc
        usage = body.get("usage", {}) or {}
        return ChatResult(
            text=text,
            tokens_in=int(usage.get("prompt_tokens", 0)),
            tokens_out=int(usage.get("completion_tokens", 0)),
        )


class ScriptedChatProvider:
    """Deterministic provider for tests: replays canned replies in order.

    Entries may be strings or exceptions (raised when reached). Stands in
    for a remote provider, so records made with it say remote.
    """

    remote = True

    def __init__(self, replies: list, tag: str = "scripted-chat"):
        self.replies = list(replies)
        self.tag = tag
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> ChatResult:
        self.prompts.append(prompt)
        if not self.replies:
            raise ProviderUnavailable("scripted provider exhausted")
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return ChatResult(
            text=reply,
            tokens_in=estimate_tokens(prompt),
            tokens_out=estimate_tokens(reply),
        )
