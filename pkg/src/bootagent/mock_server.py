"""Scripted chat-completions endpoint on loopback HTTP.

Responses depend only on arrival order. Every request is logged before it is
answered, so tests can assert on what the agent sent after the fact.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Optional, Union

from .chat_protocol import (
    ChatRequest, ChatResponse, ProtocolError, assistant, decode_request, decode_response, encode_response,
)


class ScriptError(ValueError):
    pass


class ParseError(ScriptError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvariantViolation(ScriptError):
    pass


class BindFailure(OSError):
    pass


@dataclass(frozen=True)
class StatusReply:
    status: int
    body: str = ""


@dataclass(frozen=True)
class ScriptStep:
    respond: Union[ChatResponse, StatusReply]
    repeat: int = 1

    def __post_init__(self) -> None:
        if self.repeat < 1:
            raise InvariantViolation("repeat must be >= 1")


@dataclass(frozen=True)
class Script:
    steps: tuple[ScriptStep, ...]
    on_exhausted: Union[str, tuple[str, str]] = "error_500"  # or ("final_stop", text)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps and self.on_exhausted == "error_500":
            raise InvariantViolation("an empty script needs on_exhausted final_stop")

    def expanded(self) -> list[Union[ChatResponse, StatusReply]]:
        return [step.respond for step in self.steps for _ in range(step.repeat)]


def stop(text: str, model: str = "") -> ChatResponse:
    return ChatResponse(assistant(text), "stop", model)


def calls(*tool_calls, content: Optional[str] = None, model: str = "") -> ChatResponse:
    return ChatResponse(assistant(content, tool_calls), "tool_calls", model)


def script_to_wire(script: Script) -> dict[str, Any]:
    steps = []
    for step in script.steps:
        entry: dict[str, Any] = {"repeat": step.repeat}
        if isinstance(step.respond, StatusReply):
            entry.update(status=step.respond.status, body=step.respond.body)
        else:
            wire = step.respond.to_wire()
            if not step.respond.model:
                del wire["model"]
            entry["response"] = wire
        steps.append(entry)
    exhausted = script.on_exhausted
    return {
        "on_exhausted": exhausted if exhausted == "error_500" else {"final_stop": exhausted[1]},
        "steps": steps,
    }


def script_from_wire(obj: Any) -> Script:
    if not isinstance(obj, dict):
        raise InvariantViolation("script must be an object")
    raw_exhausted = obj.get("on_exhausted", "error_500")
    if raw_exhausted == "error_500":
        exhausted: Union[str, tuple[str, str]] = "error_500"
    elif isinstance(raw_exhausted, dict) and isinstance(raw_exhausted.get("final_stop"), str):
        exhausted = ("final_stop", raw_exhausted["final_stop"])
    else:
        raise InvariantViolation(f"bad on_exhausted: {raw_exhausted!r}")
    raw_steps = obj.get("steps", [])
    if not isinstance(raw_steps, list):
        raise InvariantViolation("steps must be a list")
    steps = []
    for i, raw in enumerate(raw_steps):
        if not isinstance(raw, dict):
            raise InvariantViolation(f"step {i} is not an object")
        repeat = raw.get("repeat", 1)
        if not isinstance(repeat, int) or isinstance(repeat, bool) or repeat < 1:
            raise InvariantViolation(f"step {i}: repeat must be an integer >= 1")
        if "response" in raw:
            try:
                respond: Union[ChatResponse, StatusReply] = decode_response(json.dumps(raw["response"]))
            except ProtocolError as exc:
                raise InvariantViolation(f"step {i}: {exc}") from None
        elif isinstance(raw.get("status"), int):
            respond = StatusReply(raw["status"], str(raw.get("body", "")))
        else:
            raise InvariantViolation(f"step {i} needs a response or a status")
        steps.append(ScriptStep(respond, repeat))
    return Script(tuple(steps), exhausted)


def load_script(source: str) -> Script:
    if not source.strip():
        raise InvariantViolation("empty script document")
    try:
        obj = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return script_from_wire(obj)


def load_script_file(path: str | Path) -> Script:
    return load_script(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LogEntry:
    index: int
    path: str
    headers: dict[str, str]
    body: bytes
    request: Optional[ChatRequest] = None
    error: Optional[str] = None

    def header(self, name: str) -> Optional[str]:
        for key, value in self.headers.items():
            if key.lower() == name.lower():
                return value
        return None


@dataclass
class RequestLog:
    entries: list[LogEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i: int) -> LogEntry:
        return self.entries[i]


class _Handler(BaseHTTPRequestHandler):
    server: "_Server"
    # One request per connection, so shutdown can join every handler thread.
    protocol_version = "HTTP/1.0"

    def log_message(self, format: str, *args: Any) -> None:
        pass

    def _send(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        if self.path.split("?", 1)[0].rstrip("/") != "/chat/completions":
            self._send(404, b'{"error":"not found"}')
            return
        status, payload = self.server.mock.handle(self.path, dict(self.headers.items()), body)
        self._send(status, payload)

    def do_GET(self) -> None:
        self._send(404, b'{"error":"not found"}')


class _Server(ThreadingHTTPServer):
    daemon_threads = False
    mock: "MockServer"


class MockServer:
    """Handle to a running mock endpoint. Use as a context manager or call :meth:`shutdown`."""

    def __init__(self, script: Script, host: str = "127.0.0.1", port: int = 0):
        self.script = script
        self._responses = script.expanded()
        self._cursor = 0
        self._log = RequestLog()
        self._lock = threading.Lock()
        try:
            self._httpd = _Server((host, port), _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from None
        self._httpd.mock = self
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="mock-llm", daemon=True)
        self._thread.start()
        self._stopped = False

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host = self._httpd.server_address[0]
        return f"http://{host}:{self.port}"

    @property
    def log(self) -> RequestLog:
        return self._log

    def handle(self, path: str, headers: dict[str, str], body: bytes) -> tuple[int, bytes]:
        with self._lock:
            request, error = None, None
            try:
                request = decode_request(body)
            except ProtocolError as exc:
                error = str(exc)
            self._log.entries.append(LogEntry(len(self._log), path, headers, body, request, error))
            if self._cursor < len(self._responses):
                step = self._responses[self._cursor]
            elif self.script.on_exhausted == "error_500":
                step = StatusReply(500, '{"error":"script exhausted"}')
            else:
                step = stop(self.script.on_exhausted[1])
            self._cursor += 1
        if isinstance(step, StatusReply):
            return step.status, step.body.encode("utf-8")
        if not step.model:
            # Echo the requested model when the script leaves it unset.
            step = ChatResponse(step.message, step.finish_reason, request.model if request else "")
        return 200, encode_response(step)

    def shutdown(self) -> RequestLog:
        if not self._stopped:
            self._stopped = True
            self._httpd.shutdown()
            self._httpd.server_close()
            self._thread.join(timeout=5)
        return self._log

    def __enter__(self) -> "MockServer":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.shutdown()


def serve(script: Script, host: str = "127.0.0.1", port: int = 0) -> MockServer:
    return MockServer(script, host, port)
