import json

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from bootagent.agent_core import (
    API_FAILURE, COMPLETED, TURN_LIMIT, AgentConfig, build_system_prompt, run_agent,
)
from bootagent.chat_protocol import ChatRequest, ToolCall, encode_request, validate_message_sequence
from bootagent.llm_backend import ScriptedBackend
from bootagent.mock_server import calls, stop
from bootagent.toolbox import TOOL_NAMES
from bootagent.trajectory import MemorySink, check_stream


def cfg(workdir, **kw):
    return AgentConfig(model=kw.pop("model", "m"), task=kw.pop("task", "do it"), cwd=str(workdir), **kw)


def ls(i=0):
    return calls(ToolCall(f"c{i}", "list_files", "{}"))


def test_single_turn(sandbox):
    b = ScriptedBackend([stop("all done")])
    out = run_agent(cfg(sandbox.root), b, sandbox)
    assert (out.status, out.final_text, out.turns_used) == (COMPLETED, "all done", 1)
    req = b.requests[0]
    assert [m.role for m in req.messages] == ["system", "user"]
    assert req.messages[1].content == "do it"
    assert tuple(t.name for t in req.tools) == TOOL_NAMES


def test_tool_roundtrip_writes_file(sandbox):
    write = calls(ToolCall("w1", "write_file", json.dumps({"path": "out/a.txt", "content": "hi"})))
    b = ScriptedBackend([write, stop("wrote it")])
    out = run_agent(cfg(sandbox.root), b, sandbox)
    assert out.status == COMPLETED and (sandbox.root / "out" / "a.txt").read_text() == "hi"
    last = b.requests[1].messages[-1]
    assert last.role == "tool" and last.tool_call_id == "w1" and last.content == "ok: wrote 2 bytes"


def test_tool_error_is_fed_back(sandbox):
    b = ScriptedBackend([calls(ToolCall("r1", "read_file", '{"path": "nope"}')), stop("recovered")])
    out = run_agent(cfg(sandbox.root), b, sandbox)
    assert out.status == COMPLETED
    assert b.requests[1].messages[-1].content.startswith("error: ")


def test_parallel_calls_answered_in_order(sandbox):
    both = calls(ToolCall("a", "list_files", "{}"), ToolCall("b", "bogus", "{}"))
    b = ScriptedBackend([both, stop("ok")])
    run_agent(cfg(sandbox.root), b, sandbox)
    tail = b.requests[1].messages[-2:]
    assert [m.tool_call_id for m in tail] == ["a", "b"]


def test_turn_limit(sandbox):
    b = ScriptedBackend([ls(i) for i in range(10)])
    out = run_agent(cfg(sandbox.root, max_turns=3), b, sandbox)
    assert (out.status, out.turns_used, len(b.requests)) == (TURN_LIMIT, 3, 3)
    assert out.final_text is None


def test_backend_failure_is_an_outcome(sandbox):
    out = run_agent(cfg(sandbox.root), ScriptedBackend([ls()]), sandbox)
    assert out.status == API_FAILURE and "Terminal" in out.error


def test_trajectory_stream(sandbox):
    sink = MemorySink(secrets=["sk-zzz"])
    run_agent(cfg(sandbox.root, api_key="sk-zzz"), ScriptedBackend([ls(), stop("done")]), sandbox, sink)
    check_stream(sink.events)
    assert [e.kind for e in sink.events] == ["run_start", "request", "response", "tool_exec", "request",
                                             "response", "run_end"]
    assert sink.events[0].payload["config"]["api_key"] == "[REDACTED]"
    assert sink.events[-1].payload["status"] == COMPLETED
    assert "sk-zzz" not in json.dumps([e.to_dict() for e in sink.events])


def test_system_prompt_is_deterministic(sandbox):
    prompt = build_system_prompt(sandbox)
    assert prompt == build_system_prompt(sandbox)
    assert str(sandbox.root) in prompt and all(name in prompt for name in TOOL_NAMES)


def test_config_validation(workdir):
    with pytest.raises(ValueError):
        cfg(workdir, max_turns=0)
    with pytest.raises(ValueError):
        cfg(workdir, task="")


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(1, 8), st.integers(0, 10))
def test_calls_bounded_and_prefix_grows(sandbox, max_turns, n_tool_turns):
    b = ScriptedBackend([ls(i) for i in range(n_tool_turns)] + [stop("done")])
    out = run_agent(cfg(sandbox.root, max_turns=max_turns), b, sandbox)
    assert len(b.requests) <= max_turns
    assert out.turns_used == len(b.requests)
    assert out.status == (COMPLETED if n_tool_turns < max_turns else TURN_LIMIT)
    for prev, nxt in zip(b.requests, b.requests[1:]):
        assert nxt.messages[:len(prev.messages)] == prev.messages
        assert len(nxt.messages) > len(prev.messages)
    for req in b.requests:
        assert validate_message_sequence(req.messages)
        encode_request(req)
