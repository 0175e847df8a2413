"""Chat-completions wire subset shared by the agent, the HTTP backend and the mock server.

Only one choice, no streaming, no usage accounting. Field names follow the
de-facto ``/chat/completions`` shape; key order on the wire is insignificant,
but :func:`encode_request` always emits sorted keys so that request digests
are stable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

ROLES = ("system", "user", "assistant", "tool")
FINISH_REASONS = ("stop", "tool_calls")


class ProtocolError(ValueError):
    """A value or payload violates the wire contract."""

    def __init__(self, message: str, fragment: Any = None):
        super().__init__(message)
        self.fragment = fragment


def canonical_dumps(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, compact separators, raw UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: str = "{}"

    def to_wire(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "type": "function",
            "function": {"name": self.name, "arguments": self.arguments},
        }

    @classmethod
    def from_wire(cls, obj: Any) -> "ToolCall":
        if not isinstance(obj, dict):
            raise ProtocolError("tool call is not an object", obj)
        fn = obj.get("function")
        if not isinstance(fn, dict):
            raise ProtocolError("tool call lacks a function object", obj)
        call_id, name, args = obj.get("id"), fn.get("name"), fn.get("arguments", "{}")
        if not isinstance(call_id, str) or not call_id:
            raise ProtocolError("tool call id missing or empty", obj)
        if not isinstance(name, str):
            raise ProtocolError("tool call name missing", obj)
        if isinstance(args, (dict, list)):
            # Some servers send the argument document unserialized.
            args = canonical_dumps(args)
        if not isinstance(args, str):
            raise ProtocolError("tool call arguments must be text", obj)
        return cls(id=call_id, name=name, arguments=args)


@dataclass(frozen=True)
class Message:
    role: str
    content: Optional[str] = None
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))
        problem = self.problem()
        if problem:
            raise ProtocolError(problem, self)

    def problem(self) -> Optional[str]:
        if self.role not in ROLES:
            return f"unknown role {self.role!r}"
        if self.content is not None and not isinstance(self.content, str):
            return "content must be text or null"
        if self.role == "tool":
            if not self.tool_call_id:
                return "tool message without tool_call_id"
            if self.content is None:
                return "tool message without content"
            if self.tool_calls:
                return "tool message cannot carry tool_calls"
        elif self.role == "assistant":
            if self.content is None and not self.tool_calls:
                return "assistant message needs content or tool_calls"
            if self.tool_call_id is not None:
                return "assistant message cannot carry tool_call_id"
            ids = [c.id for c in self.tool_calls]
            if len(set(ids)) != len(ids):
                return "duplicate tool call id within one assistant message"
        else:
            if self.tool_calls or self.tool_call_id is not None:
                return f"{self.role} message cannot carry tool fields"
        return None

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            out["tool_calls"] = [c.to_wire() for c in self.tool_calls]
        if self.tool_call_id is not None:
            out["tool_call_id"] = self.tool_call_id
        return out

    @classmethod
    def from_wire(cls, obj: Any) -> "Message":
        if not isinstance(obj, dict):
            raise ProtocolError("message is not an object", obj)
        raw_calls = obj.get("tool_calls") or []
        if not isinstance(raw_calls, list):
            raise ProtocolError("tool_calls must be a list", obj)
        return cls(
            role=obj.get("role"),
            content=obj.get("content"),
            tool_calls=tuple(ToolCall.from_wire(c) for c in raw_calls),
            tool_call_id=obj.get("tool_call_id"),
        )


def system(content: str) -> Message:
    return Message("system", content)


def user(content: str) -> Message:
    return Message("user", content)


def assistant(content: Optional[str] = None, tool_calls: Sequence[ToolCall] = ()) -> Message:
    return Message("assistant", content, tuple(tool_calls))


def tool_reply(tool_call_id: str, content: str) -> Message:
    return Message("tool", content, tool_call_id=tool_call_id)


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict[str, Any] = field(default_factory=dict)

    @property
    def required(self) -> list[str]:
        return list(self.parameters.get("required", []))

    def to_wire(self) -> dict[str, Any]:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            },
        }

    @classmethod
    def from_wire(cls, obj: Any) -> "ToolSpec":
        fn = obj.get("function") if isinstance(obj, dict) else None
        if not isinstance(fn, dict) or not isinstance(fn.get("name"), str):
            raise ProtocolError("malformed tool spec", obj)
        return cls(fn["name"], fn.get("description", ""), fn.get("parameters") or {})


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    tools: tuple[ToolSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "tools", tuple(self.tools))

    def to_wire(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [m.to_wire() for m in self.messages],
            "tools": [t.to_wire() for t in self.tools],
        }


@dataclass(frozen=True)
class ChatResponse:
    message: Message
    finish_reason: str
    model: str = ""

    def to_wire(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "choices": [{"index": 0, "message": self.message.to_wire(), "finish_reason": self.finish_reason}],
        }


@dataclass(frozen=True)
class SequenceVerdict:
    valid: bool
    index: Optional[int] = None
    reason: Optional[str] = None
    pending: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.valid


def validate_message_sequence(msgs: Sequence[Message], allow_pending: bool = False) -> SequenceVerdict:
    """Check the conversation grammar.

    Tool replies must follow their assistant message immediately, one per call,
    in call order. With ``allow_pending`` a trailing assistant message whose
    calls are only partly answered is accepted (the prefix form).
    """

    def bad(i: int, reason: str) -> SequenceVerdict:
        return SequenceVerdict(False, i, reason)

    if not msgs:
        return bad(0, "empty message list")
    if msgs[0].role != "system":
        return bad(0, "first message must be system")
    pending: list[str] = []
    for i, msg in enumerate(msgs):
        problem = msg.problem()
        if problem:
            return bad(i, problem)
        if i > 0 and msg.role == "system":
            return bad(i, "more than one system message")
        if msg.role == "tool":
            if not pending:
                return bad(i, "tool result without pending call")
            if msg.tool_call_id != pending[0]:
                if msg.tool_call_id in pending:
                    return bad(i, "tool result out of call order")
                return bad(i, "tool result without pending call")
            pending.pop(0)
            continue
        if pending:
            return bad(i, f"{msg.role} message before all tool results arrived")
        if msg.role == "assistant":
            pending = [c.id for c in msg.tool_calls]
    if pending and not allow_pending:
        return bad(len(msgs), "tool calls left unanswered")
    return SequenceVerdict(True, pending=tuple(pending))


def check_request(req: ChatRequest) -> None:
    verdict = validate_message_sequence(req.messages)
    if not verdict:
        raise ProtocolError(f"invalid message sequence at index {verdict.index}: {verdict.reason}")
    if not isinstance(req.model, str):
        raise ProtocolError("model must be text")
    names = [t.name for t in req.tools]
    if len(set(names)) != len(names):
        raise ProtocolError("duplicate tool names in catalog")


def encode_request(req: ChatRequest) -> bytes:
    if not req.messages:
        raise ProtocolError("empty message list")
    check_request(req)
    return canonical_dumps(req.to_wire()).encode("utf-8")


def request_digest(req: ChatRequest) -> str:
    return sha256_hex(encode_request(req))


def _load(payload: bytes | str) -> Any:
    try:
        return json.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        excerpt = payload[:200] if isinstance(payload, (bytes, str)) else payload
        raise ProtocolError(f"malformed payload: {exc}", excerpt) from None


def decode_request(payload: bytes | str) -> ChatRequest:
    obj = _load(payload)
    if not isinstance(obj, dict):
        raise ProtocolError("request is not an object", obj)
    raw_msgs, raw_tools = obj.get("messages"), obj.get("tools") or []
    if not isinstance(raw_msgs, list) or not isinstance(raw_tools, list):
        raise ProtocolError("messages and tools must be lists", obj)
    req = ChatRequest(
        model=obj.get("model", ""),
        messages=tuple(Message.from_wire(m) for m in raw_msgs),
        tools=tuple(ToolSpec.from_wire(t) for t in raw_tools),
    )
    if not req.messages:
        raise ProtocolError("empty message list", obj)
    check_request(req)
    return req


def encode_response(resp: ChatResponse) -> bytes:
    return canonical_dumps(resp.to_wire()).encode("utf-8")


def decode_response(payload: bytes | str) -> ChatResponse:
    obj = _load(payload)
    if not isinstance(obj, dict):
        raise ProtocolError("response is not an object", obj)
    choices = obj.get("choices")
    if not isinstance(choices, list) or not choices:
        raise ProtocolError("response has no choices", obj.get("choices"))
    choice = choices[0]
    if not isinstance(choice, dict):
        raise ProtocolError("choice is not an object", choice)
    reason = choice.get("finish_reason")
    if reason not in FINISH_REASONS:
        raise ProtocolError(f"unknown finish_reason {reason!r}", choice)
    raw = choice.get("message")
    if not isinstance(raw, dict):
        raise ProtocolError("choice lacks a message", choice)
    if raw.get("role", "assistant") != "assistant":
        raise ProtocolError("choice message is not from the assistant", raw)
    raw = dict(raw, role="assistant")
    if reason == "stop" and raw.get("content") is None and not raw.get("tool_calls"):
        raw["content"] = ""
    message = Message.from_wire(raw)
    if (reason == "tool_calls") != bool(message.tool_calls):
        raise ProtocolError("finish_reason disagrees with tool_calls", choice)
    model = obj.get("model", "")
    return ChatResponse(message=message, finish_reason=reason, model=model if isinstance(model, str) else "")
