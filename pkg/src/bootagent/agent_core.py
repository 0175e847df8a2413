"""The tool loop: call the model, run the tools it asks for, repeat until it answers."""

from __future__ import annotations

import platform
import sys
from dataclasses import dataclass, field
from typing import Any, Optional

from . import __version__
from .chat_protocol import (
    ChatRequest, Message, ProtocolError, assistant, encode_request, sha256_hex, system, tool_reply, user,
    validate_message_sequence,
)
from .llm_backend import Backend, BackendError
from .toolbox import Sandbox, execute_tool, tool_catalog
from .trajectory import REDACTED

DEFAULT_MAX_TURNS = 40

COMPLETED, TURN_LIMIT, API_FAILURE = "completed", "turn_limit", "api_failure"


@dataclass(frozen=True)
class AgentConfig:
    model: str
    task: str
    cwd: str
    base_url: str = "https://api.openai.com/v1"
    api_key: str = ""
    max_turns: int = DEFAULT_MAX_TURNS

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if not self.task:
            raise ValueError("task must be non-empty")

    def redacted(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "base_url": self.base_url,
            "api_key": REDACTED if self.api_key else "",
            "max_turns": self.max_turns,
            "cwd": self.cwd,
            "task": self.task,
        }


@dataclass
class Conversation:
    messages: list[Message] = field(default_factory=list)

    @property
    def turns_used(self) -> int:
        return sum(1 for m in self.messages if m.role == "assistant")

    def append(self, msg: Message, allow_pending: bool = False) -> None:
        candidate = self.messages + [msg]
        verdict = validate_message_sequence(candidate, allow_pending=allow_pending)
        if not verdict:
            raise ProtocolError(f"conversation invalid at {verdict.index}: {verdict.reason}")
        self.messages = candidate


@dataclass(frozen=True)
class RunOutcome:
    status: str
    final_text: Optional[str]
    turns_used: int
    error: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "final_text": self.final_text,
                "turns_used": self.turns_used, "error": self.error}


def build_system_prompt(sb: Sandbox) -> str:
    return (
        "You are a coding agent. You complete the user's task by calling tools "
        "that act on a single working directory.\n"
        f"Working directory: {sb.root}\n"
        "Tools (paths are relative to the working directory; leaving it is refused):\n"
        "- read_file(path): return the contents of a file.\n"
        "- write_file(path, content): create or overwrite a file, creating parent directories.\n"
        "- list_files(path?): list a directory; directories end with '/'.\n"
        "- run_shell(command, timeout_s?): run a shell command in the working directory; "
        "reports exit status, stdout and stderr.\n"
        "Tool failures come back as text starting with 'error: '; read them and adapt.\n"
        "When the task is done, reply with plain text and no tool calls. "
        "That reply is printed as the final result."
    )


def environment_info() -> dict[str, str]:
    return {
        "agent_version": __version__,
        "python": platform.python_version(),
        "implementation": sys.implementation.name,
        "platform": platform.platform(),
    }


class _NullSink:
    def emit(self, kind: str, payload: dict[str, Any]) -> None:
        pass


def run_agent(cfg: AgentConfig, backend: Backend, sandbox: Sandbox, sink=None) -> RunOutcome:
    """Drive one task to an outcome. Failures are reported in the outcome, never raised."""
    sink = sink or _NullSink()
    tools = tuple(tool_catalog())
    convo = Conversation()
    convo.append(system(build_system_prompt(sandbox)))
    convo.append(user(cfg.task))
    sink.emit("run_start", {"config": cfg.redacted(), "environment": environment_info()})

    def finish(outcome: RunOutcome) -> RunOutcome:
        sink.emit("run_end", outcome.to_dict())
        return outcome

    while convo.turns_used < cfg.max_turns:
        req = ChatRequest(cfg.model, tuple(convo.messages), tools)
        body = encode_request(req)
        sink.emit("request", {"body": body.decode("utf-8"), "digest": sha256_hex(body)})
        try:
            reply = backend.send(req)
        except BackendError as exc:
            return finish(RunOutcome(API_FAILURE, None, convo.turns_used, f"{type(exc).__name__}: {exc}"))
        sink.emit("response", {"body": reply.body.decode("utf-8", errors="replace")})
        msg = reply.response.message
        if reply.response.finish_reason == "stop":
            convo.append(assistant(msg.content or ""))
            return finish(RunOutcome(COMPLETED, msg.content or "", convo.turns_used))
        convo.append(assistant(msg.content, msg.tool_calls), allow_pending=True)
        for call in msg.tool_calls:
            result = execute_tool(sandbox, call)
            convo.append(tool_reply(call.id, result.output), allow_pending=True)
            sink.emit("tool_exec", {
                "call": {"id": call.id, "name": call.name, "arguments": call.arguments},
                "result": result.to_dict(),
            })
    return finish(RunOutcome(TURN_LIMIT, None, convo.turns_used))
