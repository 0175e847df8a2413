import itertools
import json

import pytest
from hypothesis import given, strategies as st

from bootagent.chat_protocol import (
    ChatRequest, ChatResponse, Message, ProtocolError, ToolCall, assistant, canonical_dumps, decode_request,
    decode_response, encode_request, encode_response, request_digest, system, tool_reply, user,
    validate_message_sequence,
)
from bootagent.toolbox import tool_catalog

text = st.text(max_size=40)
ident = st.text("abcdefghijklmnopqrstuvwxyz_0123456789", min_size=1, max_size=12)
json_scalar = st.one_of(st.none(), st.booleans(), st.integers(-1000, 1000), text)
arguments = st.one_of(st.dictionaries(ident, json_scalar, max_size=4).map(canonical_dumps), text)


@st.composite
def tool_calls(draw, n=None):
    n = draw(st.integers(1, 4)) if n is None else n
    ids = draw(st.lists(ident, min_size=n, max_size=n, unique=True))
    return tuple(ToolCall(f"call_{i}", draw(ident), draw(arguments)) for i in ids)


@st.composite
def conversations(draw):
    msgs = [system(draw(text)), user(draw(text))]
    for _ in range(draw(st.integers(0, 3))):
        calls = draw(tool_calls())
        msgs.append(assistant(draw(st.one_of(st.none(), text)), calls))
        msgs.extend(tool_reply(c.id, draw(text)) for c in calls)
    return msgs


@st.composite
def responses(draw):
    if draw(st.booleans()):
        return ChatResponse(assistant(draw(text)), "stop", draw(ident))
    return ChatResponse(assistant(draw(st.one_of(st.none(), text)), draw(tool_calls())), "tool_calls", draw(ident))


def test_request_wire_shape():
    req = ChatRequest("m1", (system("s"), user("hi")), tuple(tool_catalog()))
    wire = json.loads(encode_request(req))
    assert wire["model"] == "m1"
    assert [m["role"] for m in wire["messages"]] == ["system", "user"]
    assert {t["type"] for t in wire["tools"]} == {"function"}
    assert [t["function"]["name"] for t in wire["tools"]] == ["read_file", "write_file", "list_files", "run_shell"]


def test_tool_call_arguments_are_a_json_string():
    msg = assistant(None, (ToolCall("c1", "read_file", '{"path":"a.txt"}'),))
    wire = msg.to_wire()["tool_calls"][0]
    assert wire["type"] == "function"
    assert json.loads(wire["function"]["arguments"]) == {"path": "a.txt"}


def test_object_arguments_are_serialized_on_decode():
    call = ToolCall.from_wire({"id": "c", "function": {"name": "f", "arguments": {"b": 1, "a": 2}}})
    assert call.arguments == '{"a":2,"b":1}'


def test_encode_rejects_empty_messages():
    with pytest.raises(ProtocolError, match="empty message list"):
        encode_request(ChatRequest("m", (), ()))


def test_decode_response_examples():
    body = {"choices": [{"message": {"role": "assistant", "content": "done"}, "finish_reason": "stop"}],
            "model": "x"}
    resp = decode_response(json.dumps(body))
    assert resp.message.content == "done" and resp.finish_reason == "stop"

    body["choices"][0]["message"]["content"] = None
    assert decode_response(json.dumps(body)).message.content == ""


@pytest.mark.parametrize("body", [
    "not json",
    json.dumps({"choices": []}),
    json.dumps({"choices": [{"message": {"role": "assistant", "content": "x"}, "finish_reason": "length"}]}),
    json.dumps({"choices": [{"message": {"role": "assistant", "content": "x"}, "finish_reason": "tool_calls"}]}),
    json.dumps({"choices": [{"message": {"role": "assistant", "content": None, "tool_calls": [
        {"id": "", "type": "function", "function": {"name": "f", "arguments": "{}"}}]},
        "finish_reason": "tool_calls"}]}),
])
def test_decode_response_rejects(body):
    with pytest.raises(ProtocolError):
        decode_response(body)


@given(conversations(), st.sampled_from([(), tuple(tool_catalog())]), ident)
def test_request_round_trip(msgs, tools, model):
    req = ChatRequest(model, tuple(msgs), tools)
    payload = encode_request(req)
    assert decode_request(payload) == req
    assert encode_request(decode_request(payload)) == payload


@given(responses())
def test_response_round_trip(resp):
    assert decode_response(encode_response(resp)) == resp


@given(responses(), st.dictionaries(st.text(min_size=1, max_size=8).map(lambda k: "x_" + k), json_scalar,
                                    max_size=3))
def test_unknown_fields_ignored(resp, extra):
    wire = resp.to_wire()
    wire.update(extra)
    wire["choices"][0].update(extra)
    wire["choices"][0]["message"].update(extra)
    assert decode_response(json.dumps(wire)) == resp


def test_request_digest_is_canonical():
    req = ChatRequest("m", (system("s"), user("u")), ())
    reordered = json.dumps(json.loads(encode_request(req)), sort_keys=False, indent=3)
    assert request_digest(decode_request(reordered)) == request_digest(req)
    assert canonical_dumps({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


@pytest.mark.parametrize("msgs,reason", [
    ([], "empty message list"),
    ([user("u")], "first message must be system"),
    ([system("s"), system("t")], "more than one system message"),
    ([system("s"), user("u"), tool_reply("c1", "x")], "tool result without pending call"),
])
def test_invalid_sequences(msgs, reason):
    verdict = validate_message_sequence(msgs)
    assert not verdict and verdict.reason == reason


def test_unanswered_calls_only_valid_when_pending_allowed():
    msgs = [system("s"), user("u"), assistant(None, (ToolCall("c1", "f"),))]
    assert validate_message_sequence(msgs).reason == "tool calls left unanswered"
    assert validate_message_sequence(msgs, allow_pending=True)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_only_call_order_is_accepted(n):
    calls = tuple(ToolCall(f"c{i}", "f") for i in range(n))
    head = [system("s"), user("u"), assistant(None, calls)]
    for perm in itertools.permutations(range(n)):
        msgs = head + [tool_reply(f"c{i}", "r") for i in perm]
        assert bool(validate_message_sequence(msgs)) == (list(perm) == list(range(n)))


@given(conversations())
def test_valid_conversation_prefixes(msgs):
    assert validate_message_sequence(msgs)
    for k in range(1, len(msgs) + 1):
        assert validate_message_sequence(msgs[:k], allow_pending=True)


def test_message_requires_known_role():
    with pytest.raises(ProtocolError):
        Message("robot", "hi")
