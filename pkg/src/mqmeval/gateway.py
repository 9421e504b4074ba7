"""Chat-completion gateway: live HTTP, deterministic mocks, and a disk cache.

Every request is summarized by a sha256 fingerprint of its canonical JSON
form.  ``Gateway.complete`` consults the cache first, so a warmed cache
replays an entire evaluation run byte-for-byte with zero network traffic.
Mock backends are scripted transcripts matched by fingerprint or prompt
substring, which makes pipeline behavior reproducible in tests and offline
replays.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import yaml

__all__ = [
    "GatewayError",
    "TransportError",
    "AuthenticationError",
    "MockScriptError",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "ChatExchange",
    "canonical_request",
    "fingerprint",
    "confidence",
    "LiveBackend",
    "MockBackend",
    "Gateway",
]

_ROLES = ("system", "user", "assistant")

# HTTP statuses worth retrying; everything else fails fast.
_TRANSIENT_STATUSES = {429, 500, 502, 503, 504}


class GatewayError(RuntimeError):
    """Base error for transport, scripting, and cache failures."""


class TransportError(GatewayError):
    """Network-level failure that persisted through the retry budget."""


class AuthenticationError(GatewayError):
    """Credentials rejected or unavailable; never retried."""


class MockScriptError(GatewayError):
    """A mock transcript could not answer a request."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"invalid role {self.role!r}; expected one of {_ROLES}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    want_logprobs: bool = True
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None
    backend: str

    def __post_init__(self) -> None:
        if self.backend not in ("live", "cache", "mock"):
            raise ValueError(f"invalid backend tag {self.backend!r}")


@dataclass(frozen=True)
class ChatExchange:
    fingerprint: str
    request: ChatRequest
    response: ChatResponse


def canonical_request(request: ChatRequest) -> str:
    doc = {
        "model": request.model,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": float(request.temperature),
        "want_logprobs": bool(request.want_logprobs),
        "max_tokens": request.max_tokens,
    }
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def fingerprint(request: ChatRequest) -> str:
    """64-hex-char sha256 over the canonical request form."""
    return hashlib.sha256(canonical_request(request).encode("utf-8")).hexdigest()


def confidence(response: ChatResponse) -> float:
    """Sum of token log-probabilities; the response-level confidence signal.

    Raises GatewayError when the backend returned no log-probabilities;
    callers that can degrade should map that case to -inf themselves.
    """
    if response.token_logprobs is None:
        raise GatewayError("response carries no token log-probabilities")
    return float(sum(lp for _, lp in response.token_logprobs))


class Backend(Protocol):
    name: str

    def send(self, request: ChatRequest) -> ChatResponse: ...


Transport = Callable[[str, dict, dict, float], tuple[int, object]]


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float):
    import requests

    try:
        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"request to {url} failed: {exc}") from exc
    try:
        body = resp.json()
    except ValueError:
        body = None
    return resp.status_code, body


class LiveBackend:
    """OpenAI-compatible chat-completions endpoint over HTTPS.

    The API key is read from the environment variable named by
    ``api_key_env`` at send time; pass None for unauthenticated endpoints.
    Transient failures (connection errors, 429, 5xx) are retried with
    exponential backoff up to ``max_attempts``.
    """

    name = "live"

    def __init__(
        self,
        endpoint: str,
        api_key_env: str | None = "OPENAI_API_KEY",
        *,
        timeout: float = 60.0,
        max_attempts: int = 3,
        retry_wait: float = 0.5,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.retry_wait = retry_wait
        self._transport = transport or _requests_transport
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env is not None:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise AuthenticationError(
                    f"environment variable {self.api_key_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _payload(self, request: ChatRequest) -> dict:
        payload = {
            "model": request.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": float(request.temperature),
        }
        if request.want_logprobs:
            payload["logprobs"] = True
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        return payload

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = self._headers()
        payload = self._payload(request)
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                status, body = self._transport(self.endpoint, headers, payload, self.timeout)
            except TransportError as exc:
                last_error = exc
                status, body = None, None
            else:
                if status in (401, 403):
                    raise AuthenticationError(f"endpoint rejected credentials ({status})")
                if status == 200:
                    return self._parse(body)
                if status not in _TRANSIENT_STATUSES:
                    raise GatewayError(f"endpoint returned status {status}: {body!r:.200}")
                last_error = TransportError(f"endpoint returned status {status}")
            if attempt < self.max_attempts:
                self._sleep(self.retry_wait * (2 ** (attempt - 1)))
        raise TransportError(
            f"transport failed after {self.max_attempts} attempts: {last_error}"
        )

    def _parse(self, body: object) -> ChatResponse:
        try:
            choice = body["choices"][0]  # type: ignore[index]
            text = choice["message"]["content"]
        except (TypeError, KeyError, IndexError):
            raise GatewayError(f"malformed chat-completion payload: {body!r:.200}") from None
        if not isinstance(text, str):
            raise GatewayError("malformed chat-completion payload: content is not text")
        token_logprobs = None
        lp_block = choice.get("logprobs") if isinstance(choice, dict) else None
        if isinstance(lp_block, dict) and isinstance(lp_block.get("content"), list):
            pairs = []
            for item in lp_block["content"]:
                try:
                    # Clamp tiny positive values some endpoints emit.
                    pairs.append((str(item["token"]), min(float(item["logprob"]), 0.0)))
                except (TypeError, KeyError, ValueError):
                    raise GatewayError("malformed logprobs block in payload") from None
            token_logprobs = tuple(pairs)
        return ChatResponse(text=text, token_logprobs=token_logprobs, backend="live")


def _synthesize_tokens(text: str, logprobs: list[float]) -> tuple[tuple[str, float], ...]:
    """Split text into len(logprobs) chunks so tokens concatenate to text."""
    n = len(logprobs)
    if n == 0:
        return ()
    if len(text) < n:
        raise MockScriptError(
            f"cannot split {len(text)}-char text into {n} non-empty tokens"
        )
    base, rem = divmod(len(text), n)
    chunks: list[str] = []
    pos = 0
    for i in range(n):
        size = base + (1 if i < rem else 0)
        chunks.append(text[pos : pos + size])
        pos += size
    return tuple(zip(chunks, (float(lp) for lp in logprobs)))


@dataclass
class _MockEntry:
    text: str
    fingerprint: str | None = None
    substrings: tuple[str, ...] = ()
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    once: bool = False
    used: bool = False

    def matches(self, fp: str, prompt: str) -> bool:
        if self.once and self.used:
            return False
        if self.fingerprint is not None:
            return self.fingerprint == fp
        return all(s in prompt for s in self.substrings)


class MockBackend:
    """Scripted backend: ordered transcript entries, first match wins.

    Each entry carries a ``match`` clause (a request fingerprint, or one or
    more prompt substrings that must all appear in the concatenated message
    contents), the response ``text``, optional ``logprobs``, and an optional
    ``once`` flag that consumes the entry after a single use.
    """

    name = "mock"

    def __init__(self, entries: list[dict]):
        self._entries = [self._compile(i, e) for i, e in enumerate(entries)]
        self._lock = threading.Lock()

    @staticmethod
    def _compile(index: int, raw: dict) -> _MockEntry:
        ctx = f"mock entry {index}"
        if not isinstance(raw, dict) or "match" not in raw or "text" not in raw:
            raise MockScriptError(f"{ctx}: entries need 'match' and 'text' fields")
        match = raw["match"]
        if not isinstance(match, dict):
            raise MockScriptError(f"{ctx}: 'match' must be a mapping")
        fp = match.get("fingerprint")
        subs = match.get("prompt_substring")
        if (fp is None) == (subs is None):
            raise MockScriptError(
                f"{ctx}: match needs exactly one of fingerprint/prompt_substring"
            )
        if isinstance(subs, str):
            substrings: tuple[str, ...] = (subs,)
        elif subs is None:
            substrings = ()
        else:
            substrings = tuple(str(s) for s in subs)
        text = str(raw["text"])
        token_logprobs = None
        if raw.get("logprobs") is not None:
            lps = raw["logprobs"]
            if lps and isinstance(lps[0], (list, tuple)):
                token_logprobs = tuple((str(t), float(lp)) for t, lp in lps)
                joined = "".join(t for t, _ in token_logprobs)
                if joined != text:
                    raise MockScriptError(f"{ctx}: tokens do not concatenate to text")
            else:
                token_logprobs = _synthesize_tokens(text, [float(x) for x in lps])
            for _, lp in token_logprobs:
                if lp > 0:
                    raise MockScriptError(f"{ctx}: log-probabilities must be <= 0")
        return _MockEntry(
            text=text,
            fingerprint=fp,
            substrings=substrings,
            token_logprobs=token_logprobs,
            once=bool(raw.get("once", False)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, dict) and "entries" in doc:
            doc = doc["entries"]
        if not isinstance(doc, list):
            raise MockScriptError(f"mock transcript {path} must be a list of entries")
        return cls(doc)

    def send(self, request: ChatRequest) -> ChatResponse:
        fp = fingerprint(request)
        prompt = request.prompt_text()
        with self._lock:
            for entry in self._entries:
                if entry.matches(fp, prompt):
                    entry.used = True
                    return ChatResponse(
                        text=entry.text,
                        token_logprobs=entry.token_logprobs,
                        backend="mock",
                    )
        tail = prompt[-160:].replace("\n", " ")
        raise MockScriptError(
            f"no mock entry matches request {fp[:12]}… (prompt tail: {tail!r})"
        )


class _TokenBucket:
    def __init__(self, rate_per_second: float):
        self.rate = float(rate_per_second)
        self.capacity = max(1.0, self.rate)
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class Gateway:
    """Cache-first completion front end with bounded concurrency.

    ``max_inflight`` caps simultaneous backend calls; ``requests_per_second``
    adds a token-bucket rate limit (0 disables it).  Identical concurrent
    requests are collapsed into a single backend call.
    """

    def __init__(
        self,
        backend: Backend,
        *,
        cache_dir: str | Path | None = None,
        max_inflight: int = 8,
        requests_per_second: float = 0.0,
    ):
        if max_inflight < 1:
            raise ValueError("max_inflight must be at least 1")
        self._backend = backend
        self._cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self._cache_dir is not None:
            self._cache_dir.mkdir(parents=True, exist_ok=True)
        self._gate = threading.BoundedSemaphore(max_inflight)
        self._bucket = _TokenBucket(requests_per_second) if requests_per_second > 0 else None
        self._stats_lock = threading.Lock()
        self.stats = {"backend_calls": 0, "cache_hits": 0}
        self._inflight: dict[str, threading.Event] = {}
        self._inflight_lock = threading.Lock()

    def _cache_path(self, fp: str) -> Path:
        assert self._cache_dir is not None
        return self._cache_dir / f"{fp}.json"

    def _cache_read(self, fp: str) -> ChatResponse | None:
        if self._cache_dir is None:
            return None
        path = self._cache_path(fp)
        if not path.exists():
            return None
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            text = doc["response"]["text"]
            raw_lps = doc["response"]["token_logprobs"]
        except (ValueError, KeyError, TypeError) as exc:
            raise GatewayError(f"corrupt cache entry {path}: {exc}") from exc
        lps = None if raw_lps is None else tuple((str(t), float(lp)) for t, lp in raw_lps)
        return ChatResponse(text=str(text), token_logprobs=lps, backend="cache")

    def _cache_write(self, fp: str, request: ChatRequest, response: ChatResponse) -> None:
        if self._cache_dir is None:
            return
        doc = {
            "fingerprint": fp,
            "request": json.loads(canonical_request(request)),
            "response": {
                "text": response.text,
                "token_logprobs": (
                    None
                    if response.token_logprobs is None
                    else [[t, lp] for t, lp in response.token_logprobs]
                ),
                "backend": response.backend,
            },
        }
        blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=1)
        path = self._cache_path(fp)
        fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".w-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    def _call_backend(self, fp: str, request: ChatRequest) -> ChatResponse:
        with self._gate:
            if self._bucket is not None:
                self._bucket.acquire()
            response = self._backend.send(request)
            with self._stats_lock:
                self.stats["backend_calls"] += 1
        self._cache_write(fp, request, response)
        return response

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = fingerprint(request)
        if self._cache_dir is None:
            return self._call_backend(fp, request)
        while True:
            cached = self._cache_read(fp)
            if cached is not None:
                with self._stats_lock:
                    self.stats["cache_hits"] += 1
                return cached
            # Collapse duplicate concurrent requests onto one backend call;
            # losers wait for the winner and then re-read the cache.
            with self._inflight_lock:
                event = self._inflight.get(fp)
                if event is None:
                    self._inflight[fp] = threading.Event()
                    break
            event.wait()
        try:
            return self._call_backend(fp, request)
        finally:
            with self._inflight_lock:
                self._inflight.pop(fp).set()

    def exchange(self, request: ChatRequest) -> ChatExchange:
        return ChatExchange(
            fingerprint=fingerprint(request),
            request=request,
            response=self.complete(request),
        )
