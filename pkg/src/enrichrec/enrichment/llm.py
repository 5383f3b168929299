"""LLM clients: a deterministic offline mock and an HTTP chat-completions client."""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from typing import Protocol

from . import prompts

log = logging.getLogger(__name__)

API_KEY_ENV = "ENRICHREC_LLM_API_KEY"

# Stripped from mock entity tokens; dots stay so "U.S." survives.
_EDGE_PUNCT = ",;:!?\"'()[]{}"


class LlmError(RuntimeError):
    pass


class LlmClient(Protocol):
    def complete(self, prompt: str, max_tokens: int = 128, temperature: float = 0.0) -> str: ...


class RateLimiter:
    """Spaces calls at least ``60 / per_minute`` seconds apart (thread safe)."""

    def __init__(self, per_minute: float | None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock, self._sleep = clock, sleep

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


class MockLlmClient:
    """Offline stand-in whose answers are a pure function of (prompt, seed).

    * direct  -> ``"ENRICHED: " + title``
    * explore -> runs of capitalised title words, one run per line
    * refine  -> ``"REFINED: " + candidate + " [" + entities + "]"``

    ``fail_rate`` makes a deterministic fraction of prompts raise
    :class:`LlmError`, for exercising fallbacks.
    """

    def __init__(self, seed: int = 0, fail_rate: float = 0.0):
        self.seed = seed
        self.fail_rate = fail_rate
        self.calls = 0
        self._lock = threading.Lock()

    def _fails(self, prompt):
        if self.fail_rate <= 0:
            return False
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode()).digest()
        return int.from_bytes(digest[:8], "little") / 2**64 < self.fail_rate

    def complete(self, prompt: str, max_tokens: int = 128, temperature: float = 0.0) -> str:
        with self._lock:
            self.calls += 1
        if self._fails(prompt):
            raise LlmError("mock failure")
        fields = prompts.parse_fields(prompt)
        task = fields.get("task")
        if task == "direct":
            return "ENRICHED: " + fields.get("Title", "")
        if task == "explore":
            spans, run = [], []
            for raw in fields.get("Title", "").split():
                w = raw.strip(_EDGE_PUNCT)
                if w and w[0].isupper():
                    run.append(w)
                elif run:
                    spans.append(" ".join(run))
                    run = []
            if run:
                spans.append(" ".join(run))
            return "\n".join(spans)
        if task == "refine":
            return f"REFINED: {fields.get('Candidate title', '')} [{fields.get('Entities', '')}]"
        return ""


class HttpLlmClient:
    """OpenAI-compatible ``/chat/completions`` client.

    The API key is read from the ``ENRICHREC_LLM_API_KEY`` environment
    variable, never from config files. Transient failures are retried with
    exponential backoff; a client-side rate limit spaces requests.
    """

    def __init__(
        self,
        model: str,
        base_url: str = "https://api.openai.com/v1",
        requests_per_minute: float | None = 60,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        session=None,
        sleep=time.sleep,
    ):
        self.model = model
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.limiter = RateLimiter(requests_per_minute, sleep=sleep)
        self._sleep = sleep
        self.calls = 0
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def complete(self, prompt: str, max_tokens: int = 128, temperature: float = 0.0) -> str:
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise LlmError(f"environment variable {API_KEY_ENV} is not set")
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
            "temperature": temperature,
        }
        last = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.limiter.wait()
            self.calls += 1
            try:
                resp = self.session.post(
                    self.url, json=body, headers={"Authorization": f"Bearer {key}"}, timeout=self.timeout
                )
            except OSError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = LlmError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise LlmError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise LlmError("unexpected response payload") from exc
        raise LlmError(f"giving up after {self.retries} attempts: {last}")
