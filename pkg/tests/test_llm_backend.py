import pytest

from bootagent.chat_protocol import ChatRequest, encode_request, encode_response, system, user
from bootagent.llm_backend import (
    BackendConfig, DecodeFailure, Exhausted, HttpBackend, ReplayBackend, ReplayExhausted, ReplayMismatch,
    ReplaySource, RetryPolicy, ScriptedBackend, Terminal,
)
from bootagent.mock_server import MockServer, Script, ScriptStep, StatusReply, stop
from bootagent.chat_protocol import sha256_hex

REQ = ChatRequest("m", (system("s"), user("u")), ())


def backend(url, sleeps, **kw):
    return HttpBackend(BackendConfig(url, **kw), sleep=sleeps.append)


def test_retries_5xx_then_succeeds():
    script = Script((ScriptStep(StatusReply(500, "boom"), repeat=2), ScriptStep(stop("ok"))))
    sleeps = []
    with MockServer(script) as srv:
        b = backend(srv.url, sleeps)
        reply = b.send(REQ)
    assert reply.response.message.content == "ok"
    assert len(srv.log) == 3 and b.attempts == 3
    assert sleeps == [1.0, 2.0]


def test_429_is_retryable():
    script = Script((ScriptStep(StatusReply(429, "")), ScriptStep(stop("ok"))))
    sleeps = []
    with MockServer(script) as srv:
        backend(srv.url, sleeps).send(REQ)
    assert len(srv.log) == 2 and sleeps == [1.0]


def test_gives_up_after_three_attempts():
    script = Script((ScriptStep(StatusReply(503, ""), repeat=5),))
    sleeps = []
    with MockServer(script) as srv:
        with pytest.raises(Exhausted) as exc:
            backend(srv.url, sleeps).send(REQ)
    assert exc.value.attempts == 3 and len(srv.log) == 3
    assert sum(sleeps) == 1.0 + 2.0


@pytest.mark.parametrize("status", [400, 401, 403, 404, 422])
def test_4xx_is_terminal(status):
    sleeps = []
    with MockServer(Script((ScriptStep(StatusReply(status, "nope")),))) as srv:
        with pytest.raises(Terminal) as exc:
            backend(srv.url, sleeps).send(REQ)
    assert exc.value.status == status and len(srv.log) == 1 and sleeps == []


def test_network_error_is_retried():
    sleeps = []
    b = backend("http://127.0.0.1:9", sleeps, timeout=2)
    with pytest.raises(Exhausted):
        b.send(REQ)
    assert b.attempts == 3 and sleeps == [1.0, 2.0]


def test_bad_body_is_decode_failure_without_retry():
    sleeps = []
    with MockServer(Script((ScriptStep(StatusReply(200, "{not json")),))) as srv:
        with pytest.raises(DecodeFailure):
            backend(srv.url, sleeps).send(REQ)
    assert len(srv.log) == 1


def test_headers_and_body():
    with MockServer(Script((), ("final_stop", "x"))) as srv:
        backend(srv.url, [], api_key="sk-abc").send(REQ)
        backend(srv.url + "/", []).send(REQ)
    first, second = srv.log
    assert first.header("authorization") == "Bearer sk-abc"
    assert second.header("authorization") is None
    assert first.path == second.path == "/chat/completions"
    assert first.body == encode_request(REQ)
    assert first.header("content-type") == "application/json"


def test_retry_policy_validation():
    with pytest.raises(ValueError):
        RetryPolicy(max_attempts=0)
    with pytest.raises(ValueError):
        RetryPolicy(max_attempts=4, backoff=(1, 2))


def test_replay_serves_recorded_bodies_in_order():
    bodies = [encode_response(stop(t)) for t in ("a", "b")]
    src = ReplaySource([(sha256_hex(encode_request(REQ)), bodies[0]), (None, bodies[1])])
    rb = ReplayBackend(src)
    assert rb.send(REQ).body == bodies[0]
    assert rb.send(REQ).response.message.content == "b"
    with pytest.raises(ReplayExhausted):
        rb.send(REQ)


def test_replay_mismatch():
    src = ReplaySource([("0" * 64, encode_response(stop("a")))])
    with pytest.raises(ReplayMismatch) as exc:
        ReplayBackend(src).send(REQ)
    assert exc.value.position == 0 and src.position == 0


def test_scripted_backend_records_requests():
    sb = ScriptedBackend([stop("x")])
    assert sb.complete(REQ).message.content == "x"
    with pytest.raises(Terminal):
        sb.send(REQ)
    assert len(sb.requests) == 2
