"""Chat-completion access with record/replay caching.

Three modes:

* ``live``: call the provider, nothing is cached.
* ``record``: serve from the fixture store when the request digest is
  present, otherwise call the provider and store the response.
* ``replay_strict``: serve only from the fixture store; never touch the
  network. A missing digest raises :class:`MissingFixture`.

The fixture store is a directory of ``<digest>.json`` files holding
``{"digest", "request", "response"}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from narco.errors import MissingFixture, ProviderError, Timeout, ValidationError

log = logging.getLogger(__name__)

MODES = ("live", "record", "replay_strict")
FINISH_REASONS = ("complete", "truncated", "error")
ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output: int = 1024

    def __post_init__(self):
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        object.__setattr__(self, "messages", msgs)
        object.__setattr__(self, "temperature", float(self.temperature))
        if not msgs:
            raise ValidationError("ChatRequest needs at least one message")
        if msgs[0][0] not in ("system", "user"):
            raise ValidationError("first message must have role system or user")
        for role, _ in msgs:
            if role not in ROLES:
                raise ValidationError(f"unknown message role {role!r}")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_output < 1:
            raise ValidationError("max_output must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_output": self.max_output,
            "messages": [[r, c] for r, c in self.messages],
            "model_id": self.model_id,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChatRequest":
        return cls(
            model_id=d["model_id"],
            messages=tuple((m[0], m[1]) for m in d["messages"]),
            temperature=d.get("temperature", 0.0),
            max_output=d.get("max_output", 1024),
        )

    def followed_by(self, *messages: tuple[str, str]) -> "ChatRequest":
        return ChatRequest(self.model_id, self.messages + tuple(messages),
                           self.temperature, self.max_output)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "complete"
    provider_meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValidationError(f"unknown finish_reason {self.finish_reason!r}")
        if not self.content and self.finish_reason != "error":
            raise ValidationError("empty content is only allowed with finish_reason='error'")

    def to_dict(self) -> dict[str, Any]:
        return {
            "content": self.content,
            "finish_reason": self.finish_reason,
            "provider_meta": self.provider_meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChatResponse":
        return cls(d["content"], d.get("finish_reason", "complete"), dict(d.get("provider_meta", {})))


@dataclass
class ProviderConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    credential_ref: str = "OPENAI_API_KEY"
    retry_budget: int = 3
    timeout: float = 60.0
    mode: str = "replay_strict"
    fixture_dir: str | None = None
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    requests_per_second: float = 2.0
    burst: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.retry_budget < 0:
            raise ValidationError("retry_budget must be >= 0")
        if self.mode != "live" and not self.fixture_dir:
            raise ValidationError(f"mode {self.mode!r} needs fixture_dir")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def cache_key(request: ChatRequest) -> str:
    """SHA-256 of the canonical request serialization. Content is byte-exact."""
    return hashlib.sha256(canonical_json(request.to_dict()).encode("utf-8")).hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FixtureStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / f"{digest}.json"

    def get(self, digest: str) -> ChatResponse | None:
        p = self.path(digest)
        if not p.exists():
            return None
        payload = json.loads(p.read_text(encoding="utf-8"))
        return ChatResponse.from_dict(payload["response"])

    def put(self, request: ChatRequest, response: ChatResponse) -> str:
        digest = cache_key(request)
        payload = {"digest": digest, "request": request.to_dict(), "response": response.to_dict()}
        text = json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=1) + "\n"
        atomic_write_text(self.path(digest), text)
        return digest

    def __contains__(self, digest: str) -> bool:
        return self.path(digest).exists()


class TokenBucket:
    """Blocking token-bucket limiter shared by all callers of one provider."""

    def __init__(self, rate: float, capacity: int, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate
        self.capacity = max(1, capacity)
        self._tokens = float(self.capacity)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


Transport = Callable[[ChatRequest, ProviderConfig], ChatResponse]


class HTTPTransport:
    """POSTs the common ``messages in / choices out`` JSON shape."""

    def __init__(self, client=None):
        self._client = client

    def __call__(self, request: ChatRequest, config: ProviderConfig) -> ChatResponse:
        import httpx

        secret = os.environ.get(config.credential_ref)
        if not secret:
            raise ValidationError(f"environment variable {config.credential_ref} is not set")
        body = {
            "model": request.model_id,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }
        headers = {"Authorization": f"Bearer {secret}"}
        client = self._client or httpx
        try:
            resp = client.post(config.endpoint, json=body, headers=headers, timeout=config.timeout)
        except httpx.TimeoutException as exc:
            raise Timeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise ProviderError(str(exc)) from exc
        if resp.status_code != 200:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected response shape: {str(data)[:200]}") from exc
        reason = {"stop": "complete", "length": "truncated"}.get(choice.get("finish_reason"), "complete")
        if not content:
            reason = "error"
        meta = {k: data[k] for k in ("id", "model", "usage") if k in data}
        return ChatResponse(content, reason, meta)


class ScriptedTransport:
    """Answers requests with a local function instead of a provider.

    Used for offline tests and for authoring fixture stores.
    """

    def __init__(self, handler: Callable[[ChatRequest], str]):
        self.handler = handler
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def __call__(self, request: ChatRequest, config: ProviderConfig) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
        return ChatResponse(self.handler(request), "complete", {"scripted": True})


class Gateway:
    def __init__(self, config: ProviderConfig, transport: Transport | None = None,
                 rng: random.Random | None = None, sleep=time.sleep):
        self.config = config
        self.transport = transport or HTTPTransport()
        self.store = FixtureStore(config.fixture_dir) if config.fixture_dir else None
        self.limiter = TokenBucket(config.requests_per_second, config.burst, sleep=sleep)
        self._rng = rng or random.Random(0)
        self._sleep = sleep
        self.network_calls = 0
        self._count_lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        mode = self.config.mode
        if mode == "live":
            return self._call_with_retries(request)
        digest = cache_key(request)
        cached = self.store.get(digest)
        if cached is not None:
            return cached
        if mode == "replay_strict":
            raise MissingFixture(digest)
        response = self._call_with_retries(request)
        if response.finish_reason != "error":
            self.store.put(request, response)
        return response

    def _backoff(self, attempt: int) -> float:
        base = self.config.backoff_base
        if base <= 0:
            return 0.0
        return min(self.config.backoff_max, base * 2**attempt) + self._rng.uniform(0, base)

    def _call_with_retries(self, request: ChatRequest) -> ChatResponse:
        last: ProviderError | None = None
        for attempt in range(self.config.retry_budget + 1):
            self.limiter.acquire()
            with self._count_lock:
                self.network_calls += 1
            try:
                return self.transport(request, self.config)
            except ProviderError as exc:
                last = exc
                log.warning("provider call failed (attempt %d/%d): %s",
                            attempt + 1, self.config.retry_budget + 1, exc)
                if attempt < self.config.retry_budget:
                    self._sleep(self._backoff(attempt))
        if isinstance(last, Timeout):
            raise last
        raise ProviderError(f"retries exhausted after {self.config.retry_budget + 1} attempts: {last}")


def complete(request: ChatRequest, config: ProviderConfig,
             transport: Transport | None = None) -> ChatResponse:
    return Gateway(config, transport).complete(request)


def user_prompt(model_id: str, content: str, system: str | None = None,
                temperature: float = 0.0, max_output: int = 1024) -> ChatRequest:
    messages: Sequence[tuple[str, str]] = [("user", content)]
    if system:
        messages = [("system", system), ("user", content)]
    return ChatRequest(model_id, tuple(messages), temperature, max_output)
