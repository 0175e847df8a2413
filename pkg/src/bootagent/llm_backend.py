"""Model backends: live HTTP with a closed retry contract, and trajectory replay."""

from __future__ import annotations

import logging
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .chat_protocol import (
    ChatRequest, ChatResponse, ProtocolError, decode_response, encode_request, encode_response, sha256_hex,
)
from .trajectory import TrajectoryEvent, read_trajectory

log = logging.getLogger(__name__)


class BackendError(Exception):
    pass


class Exhausted(BackendError):
    def __init__(self, attempts: int, cause: str):
        super().__init__(f"gave up after {attempts} attempt(s): {cause}")
        self.attempts, self.cause = attempts, cause


class Terminal(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status, self.body = status, body[:500]


class DecodeFailure(BackendError):
    pass


class ReplayExhausted(BackendError):
    pass


class ReplayMismatch(BackendError):
    def __init__(self, position: int, expected: str, actual: str):
        super().__init__(f"request {position} digest {actual} does not match recorded {expected}")
        self.position, self.expected, self.actual = position, expected, actual


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if len(self.backoff) < self.max_attempts - 1:
            raise ValueError("backoff needs max_attempts - 1 entries")


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    api_key: str = ""
    timeout: float = 120.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def endpoint(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


@dataclass(frozen=True)
class Reply:
    """A decoded response plus the exact bytes it was decoded from."""

    body: bytes
    response: ChatResponse


class Backend(Protocol):
    def send(self, req: ChatRequest) -> Reply: ...


class _Retryable(Exception):
    pass


class HttpBackend:
    def __init__(self, cfg: BackendConfig, sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.sleep = sleep
        self.attempts = 0  # attempts made by the most recent send

    def _post(self, body: bytes) -> bytes:
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        request = urllib.request.Request(self.cfg.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(request, timeout=self.cfg.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            text = exc.read().decode("utf-8", errors="replace")
            if exc.code == 429 or exc.code >= 500:
                raise _Retryable(f"HTTP {exc.code}: {text[:200]}") from None
            raise Terminal(exc.code, text) from None
        except (urllib.error.URLError, ConnectionError, socket.timeout, TimeoutError, OSError) as exc:
            raise _Retryable(f"network error: {getattr(exc, 'reason', exc)}") from None

    def send(self, req: ChatRequest) -> Reply:
        body = encode_request(req)
        policy = self.cfg.retry
        self.attempts = 0
        while True:
            self.attempts += 1
            try:
                raw = self._post(body)
                break
            except _Retryable as exc:
                if self.attempts >= policy.max_attempts:
                    raise Exhausted(self.attempts, str(exc)) from None
                delay = policy.backoff[self.attempts - 1]
                log.warning("attempt %d failed (%s); retrying in %gs", self.attempts, exc, delay)
                self.sleep(delay)
        try:
            return Reply(raw, decode_response(raw))
        except ProtocolError as exc:
            raise DecodeFailure(f"{exc} (fragment: {str(exc.fragment)[:200]})") from None

    def complete(self, req: ChatRequest) -> ChatResponse:
        return self.send(req).response


def complete(cfg: BackendConfig, req: ChatRequest) -> ChatResponse:
    return HttpBackend(cfg).complete(req)


class ReplaySource:
    """Canned responses in recorded order; the cursor is advanced under a lock."""

    def __init__(self, events: Sequence[tuple[Optional[str], bytes]]):
        self.events = [(digest, body if isinstance(body, bytes) else body.encode("utf-8"))
                       for digest, body in events]
        self.position = 0
        self._lock = threading.Lock()

    @classmethod
    def from_events(cls, events: Sequence[TrajectoryEvent]) -> "ReplaySource":
        pairs = []
        digest: Optional[str] = None
        for ev in events:
            if ev.kind == "request":
                digest = ev.payload.get("digest")
            elif ev.kind == "response":
                pairs.append((digest, ev.payload["body"].encode("utf-8")))
                digest = None
        if not pairs:
            raise ValueError("trajectory holds no responses to replay")
        return cls(pairs)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplaySource":
        return cls.from_events(read_trajectory(path))

    def take(self, req: ChatRequest) -> Reply:
        with self._lock:
            if self.position >= len(self.events):
                raise ReplayExhausted(f"all {len(self.events)} recorded responses consumed")
            expected, body = self.events[self.position]
            if expected is not None:
                actual = sha256_hex(encode_request(req))
                if actual != expected:
                    raise ReplayMismatch(self.position, expected, actual)
            self.position += 1
        try:
            return Reply(body, decode_response(body))
        except ProtocolError as exc:
            raise DecodeFailure(str(exc)) from None


def complete_replay(src: ReplaySource, req: ChatRequest) -> ChatResponse:
    return src.take(req).response


class ReplayBackend:
    def __init__(self, src: ReplaySource):
        self.src = src

    def send(self, req: ChatRequest) -> Reply:
        return self.src.take(req)

    def complete(self, req: ChatRequest) -> ChatResponse:
        return self.send(req).response


class ScriptedBackend:
    """In-process backend returning responses in order; records every request."""

    def __init__(self, responses: Sequence[ChatResponse]):
        self.responses = list(responses)
        self.requests: list[ChatRequest] = []

    def send(self, req: ChatRequest) -> Reply:
        encode_request(req)
        self.requests.append(req)
        if len(self.requests) > len(self.responses):
            raise Terminal(500, "script exhausted")
        resp = self.responses[len(self.requests) - 1]
        return Reply(encode_response(resp), resp)

    def complete(self, req: ChatRequest) -> ChatResponse:
        return self.send(req).response
