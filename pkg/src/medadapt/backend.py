"""Model clients: an HTTP chat-completion backend and a scripted mock.

Every backend exposes ``complete(request) -> Completion`` and, when
``supports_scoring`` is true, ``score_tokens(prefix, continuation)``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .errors import MedadaptError, ValidationError

log = logging.getLogger(__name__)


class BackendError(MedadaptError):
    category = "backend"


class TransportError(BackendError):
    """Network-level failure; the only error class that is retried."""

    category = "transport"

    def __init__(self, message: str, attempts: int | None = None):
        self.attempts = attempts
        if attempts is not None:
            message = f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})"
        super().__init__(message)


class ProtocolError(BackendError):
    category = "protocol"

    def __init__(self, message: str, status: int | None = None):
        self.status = status
        super().__init__(message if status is None else f"HTTP {status}: {message}")


class PreconditionError(BackendError, ValidationError):
    category = "precondition"


class CapabilityError(BackendError):
    category = "capability"


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0
    want_logprobs: bool = False
    stop: tuple[str, ...] | None = None

    def validate(self) -> None:
        if not isinstance(self.max_tokens, int) or self.max_tokens < 1:
            raise PreconditionError(f"max_tokens must be >= 1, got {self.max_tokens!r}")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise PreconditionError(f"temperature must be finite and >= 0, got {self.temperature!r}")


@dataclass(frozen=True)
class Completion:
    text: str
    tokens: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self):
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple((str(t), float(lp)) for t, lp in self.tokens))
            if "".join(t for t, _ in self.tokens) != self.text:
                raise ValidationError("token texts do not concatenate to the completion text")
            if any(lp > 0 for _, lp in self.tokens):
                raise ValidationError("log-probabilities must be <= 0")

    def to_dict(self) -> dict:
        d = {"text": self.text}
        if self.tokens is not None:
            d["tokens"] = [list(t) for t in self.tokens]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Completion":
        tokens = d.get("tokens")
        return cls(d["text"], None if tokens is None else tuple(tuple(t) for t in tokens))


class Backend:
    supports_scoring = False

    def complete(self, request: BackendRequest) -> Completion:
        request.validate()
        return self._complete(request)

    def _complete(self, request: BackendRequest) -> Completion:
        raise NotImplementedError

    def score_tokens(self, prefix: str, continuation: str) -> list[float]:
        """Log-probability of each continuation token given ``prefix``."""
        if not continuation:
            raise PreconditionError("continuation must be non-empty")
        if not self.supports_scoring:
            raise CapabilityError(f"{type(self).__name__} cannot score tokens")
        return self._score(prefix, continuation)

    def _score(self, prefix: str, continuation: str) -> list[float]:
        raise NotImplementedError


def complete(backend: Backend, request: BackendRequest) -> Completion:
    return backend.complete(request)


def score_tokens(backend: Backend, prefix: str, continuation: str) -> list[float]:
    return backend.score_tokens(prefix, continuation)


# -- mock -----------------------------------------------------------------

_MOCK_TOKEN = re.compile(r"\s*\S+|\s+$")


def mock_tokenize(text: str) -> list[str]:
    """Whitespace-attached tokens: each token carries its leading whitespace."""
    return _MOCK_TOKEN.findall(text)


@dataclass(frozen=True)
class MockRule:
    match: str
    reply: Completion
    kind: str = "substring"

    def __post_init__(self):
        if self.kind not in ("exact", "substring"):
            raise ValidationError(f"unknown matcher kind {self.kind!r}")

    def matches(self, prompt: str) -> bool:
        return prompt == self.match if self.kind == "exact" else self.match in prompt


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...] = ()
    unigram: Mapping[str, float] = field(default_factory=dict)
    oov_logprob: float = -20.0

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if self.unigram:
            if any(p < 0 or p > 1 for p in self.unigram.values()):
                raise ValidationError("unigram probabilities must lie in [0, 1]")
            total = math.fsum(self.unigram.values())
            if abs(total - 1.0) > 1e-9:
                raise ValidationError(f"unigram probabilities sum to {total}, not 1")
        if self.oov_logprob > 0:
            raise ValidationError("oov_logprob must be <= 0")

    def logprob(self, token: str) -> float:
        p = self.unigram.get(token.strip())
        if p is None or p == 0:
            return self.oov_logprob
        return math.log(p)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MockScript":
        rules = []
        for r in d.get("rules", ()):
            reply = r["reply"]
            reply = Completion(reply) if isinstance(reply, str) else Completion.from_dict(reply)
            rules.append(MockRule(match=r["match"], reply=reply, kind=r.get("kind", "substring")))
        return cls(tuple(rules), dict(d.get("unigram", {})), float(d.get("oov_logprob", -20.0)))

    def to_dict(self) -> dict:
        return {
            "rules": [{"match": r.match, "kind": r.kind, "reply": r.reply.to_dict()} for r in self.rules],
            "unigram": dict(self.unigram),
            "oov_logprob": self.oov_logprob,
        }

    @classmethod
    def load(cls, path) -> "MockScript":
        """Read a script from JSON or YAML."""
        text = Path(path).read_text(encoding="utf-8")
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            return cls.from_dict(yaml.safe_load(text) or {})
        return cls.from_dict(json.loads(text))


class MockBackend(Backend):
    """Deterministic scripted backend.

    The first matching rule supplies the reply; with no match the reply is the
    most probable unigram token. Scoring ignores the prefix and uses the
    unigram table over ``mock_tokenize(continuation)``. Every call is appended
    to ``calls`` for instrumentation.
    """

    supports_scoring = True

    def __init__(self, script: MockScript):
        self.script = script
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def _record(self, kind: str, payload: str) -> None:
        with self._lock:
            self.calls.append((kind, payload))

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def _complete(self, request: BackendRequest) -> Completion:
        self._record("complete", request.prompt)
        reply = None
        for rule in self.script.rules:
            if rule.matches(request.prompt):
                reply = rule.reply
                break
        if reply is None:
            if not self.script.unigram:
                raise ProtocolError(f"no mock rule matches prompt {request.prompt[:60]!r}")
            # ties resolved by declaration order
            best = max(self.script.unigram.items(), key=lambda kv: kv[1])[0]
            reply = Completion(best)
        if not request.want_logprobs:
            return Completion(reply.text)
        if reply.tokens is not None:
            return reply
        toks = mock_tokenize(reply.text)
        return Completion(reply.text, tuple((t, self.script.logprob(t)) for t in toks))

    def _score(self, prefix: str, continuation: str) -> list[float]:
        self._record("score", prefix + "\x00" + continuation)
        toks = [t for t in mock_tokenize(continuation) if t.strip()]
        if not toks:
            raise PreconditionError("continuation has no tokens")
        return [self.script.logprob(t) for t in toks]


# -- retry ----------------------------------------------------------------


class RetryingBackend(Backend):
    """Retries ``TransportError`` with exponential backoff; anything else passes through."""

    def __init__(self, inner: Backend, max_attempts: int, base_delay: float, sleep: Callable[[float], None] = time.sleep):
        if max_attempts < 1:
            raise PreconditionError(f"max_attempts must be >= 1, got {max_attempts}")
        self.inner = inner
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self._sleep = sleep

    @property
    def supports_scoring(self):
        return self.inner.supports_scoring

    def _retry(self, fn, *args):
        for attempt in range(1, self.max_attempts + 1):
            try:
                return fn(*args)
            except TransportError as exc:
                if attempt == self.max_attempts:
                    raise TransportError(str(exc), attempts=attempt) from exc
                delay = self.base_delay * 2 ** (attempt - 1)
                log.warning("transport error (attempt %d/%d), retrying in %.2fs: %s", attempt, self.max_attempts, delay, exc)
                self._sleep(delay)

    def complete(self, request: BackendRequest) -> Completion:
        return self._retry(self.inner.complete, request)

    def score_tokens(self, prefix: str, continuation: str) -> list[float]:
        return self._retry(self.inner.score_tokens, prefix, continuation)


def with_retry(backend: Backend, max_attempts: int, base_delay: float, sleep=time.sleep) -> Backend:
    return RetryingBackend(backend, max_attempts, base_delay, sleep=sleep)


# -- HTTP -----------------------------------------------------------------


class ChatCompletionBackend(Backend):
    """Client for the common ``/chat/completions`` JSON wire format.

    Scoring needs a legacy ``/completions`` endpoint that honours
    ``echo``/``logprobs``; it is enabled only when ``score_url`` is given.
    """

    def __init__(
        self,
        url: str,
        model: str,
        auth_env: str | None = None,
        timeout: float = 60.0,
        concurrency: int = 8,
        score_url: str | None = None,
        session=None,
    ):
        import requests

        self.url = url
        self.model = model
        self.auth_env = auth_env
        self.timeout = timeout
        self.score_url = score_url
        self._session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(concurrency)
        self._requests = requests

    @property
    def supports_scoring(self):
        return self.score_url is not None

    def _headers(self, correlation_id: str) -> dict:
        headers = {"Content-Type": "application/json", "X-Request-ID": correlation_id}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, url: str, payload: dict) -> dict:
        correlation_id = uuid.uuid4().hex
        with self._slots:
            try:
                resp = self._session.post(url, json=payload, headers=self._headers(correlation_id), timeout=self.timeout)
            except self._requests.RequestException as exc:
                raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        echoed = resp.headers.get("X-Request-ID")
        if echoed is not None and echoed != correlation_id:
            raise ProtocolError(f"response correlation id {echoed!r} does not match request {correlation_id!r}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProtocolError(resp.text[:200], status=resp.status_code)
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {exc}", status=resp.status_code) from exc

    def _complete(self, request: BackendRequest) -> Completion:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "logprobs": request.want_logprobs,
        }
        if request.stop:
            payload["stop"] = list(request.stop)
        body = self._post(self.url, payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected response shape: {exc}") from exc
        tokens = None
        if request.want_logprobs:
            content = ((choice.get("logprobs") or {}).get("content")) or []
            tokens = tuple((t["token"], min(0.0, float(t["logprob"]))) for t in content)
            if "".join(t for t, _ in tokens) != text:
                tokens = None
        return Completion(text, tokens)

    def _score(self, prefix: str, continuation: str) -> list[float]:
        payload = {
            "model": self.model,
            "prompt": prefix + continuation,
            "max_tokens": 1,
            "temperature": 0,
            "echo": True,
            "logprobs": 1,
        }
        body = self._post(self.score_url, payload)
        try:
            lp = body["choices"][0]["logprobs"]
            offsets = lp["text_offset"]
            values = lp["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected scoring response shape: {exc}") from exc
        boundary = len(prefix)
        end = boundary + len(continuation)
        out = [float(v) for off, v in zip(offsets, values) if boundary <= off < end and v is not None]
        if not out:
            raise ProtocolError("scoring response has no continuation tokens")
        return [min(0.0, v) for v in out]


def build_backend(section: Mapping, base_dir: Path | None = None) -> Backend:
    """Backend from a run-config ``backend`` section (exactly one of ``endpoint``/``mock``)."""
    endpoint = section.get("endpoint")
    mock = section.get("mock")
    if bool(endpoint) == bool(mock):
        raise ValidationError("backend config needs exactly one of 'endpoint' or 'mock'")
    if mock:
        path = Path(mock)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        backend: Backend = MockBackend(MockScript.load(path))
    else:
        backend = ChatCompletionBackend(
            url=endpoint,
            model=section.get("model", "default"),
            auth_env=section.get("auth_env"),
            timeout=float(section.get("timeout", 60.0)),
            concurrency=int(section.get("concurrency", 8)),
            score_url=section.get("score_endpoint"),
        )
    retry = section.get("retry") or {}
    attempts = int(retry.get("max_attempts", 1))
    if attempts > 1:
        backend = with_retry(backend, attempts, float(retry.get("base_delay", 1.0)))
    return backend


def scripted(pairs: Sequence[tuple[str, str]], unigram: Mapping[str, float] | None = None) -> MockBackend:
    """Shorthand: substring rules from ``(match, reply)`` pairs."""
    rules = tuple(MockRule(m, Completion(r)) for m, r in pairs)
    return MockBackend(MockScript(rules, dict(unigram or {})))

