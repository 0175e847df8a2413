import json

import pytest
from hypothesis import given, strategies as st

from bootagent.chat_protocol import sha256_hex
from bootagent.trajectory import (
    REDACTED, MalformedStream, MemorySink, ProvenanceRecord, SequenceGap, SinkClosed, TrajectoryError,
    TrajectoryEvent, TrajectoryWriter, build_provenance, check_stream, compare_trajectories, read_trajectory,
    scrub, trajectory_digest, tree_digests,
)

SENTINEL = "sk-sentinel-9f8e7d6c"


def small_run(sink):
    sink.emit("run_start", {"config": {"model": "m"}})
    sink.emit("request", {"body": '{"x":1}', "digest": sha256_hex('{"x":1}')})
    sink.emit("response", {"body": "{}"})
    sink.emit("run_end", {"status": "completed"})
    return sink


def test_writer_round_trip(tmp_path):
    path = tmp_path / "t" / "run.traj.jsonl"
    w = small_run(TrajectoryWriter(path))
    assert w.closed
    events = read_trajectory(path)
    assert [e.kind for e in events] == ["run_start", "request", "response", "run_end"]
    assert [e.seq for e in events] == [0, 1, 2, 3]
    assert all(json.loads(line) for line in path.read_text().splitlines())


def test_sequence_gap(tmp_path):
    w = TrajectoryWriter(tmp_path / "run.traj.jsonl")
    w.emit("run_start", {})
    with pytest.raises(SequenceGap):
        w.append_event(TrajectoryEvent(2, "request", {}))
    with pytest.raises(SequenceGap):
        MemorySink().append_event(TrajectoryEvent(1, "run_start", {}))


def test_sink_closed_after_run_end(tmp_path):
    for sink in (TrajectoryWriter(tmp_path / "run.traj.jsonl"), MemorySink()):
        small_run(sink)
        with pytest.raises(SinkClosed):
            sink.emit("request", {})


def test_run_start_must_come_first(tmp_path):
    w = TrajectoryWriter(tmp_path / "run.traj.jsonl")
    with pytest.raises(TrajectoryError):
        w.emit("request", {})


def test_secret_never_reaches_disk(tmp_path):
    path = tmp_path / "run.traj.jsonl"
    w = TrajectoryWriter(path, secrets=[SENTINEL])
    w.emit("run_start", {"config": {"api_key": SENTINEL}, "list": [f"Bearer {SENTINEL}"]})
    w.emit("run_end", {"note": f"x{SENTINEL}y"})
    text = path.read_text()
    assert SENTINEL not in text
    assert text.count(REDACTED) == 3


@given(st.recursive(st.one_of(st.text(max_size=10), st.integers()),
                    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=5), inner,
                                                                                  max_size=3)))
def test_scrub_removes_secret(value):
    assert SENTINEL not in json.dumps(scrub([value, SENTINEL, {"k": value}], [SENTINEL]))


def test_digest_ignores_timestamps():
    a = small_run(MemorySink()).events
    b = [TrajectoryEvent(e.seq, e.kind, e.payload, "2001-02-03T04:05:06Z") for e in a]
    assert trajectory_digest(a) == trajectory_digest(b)
    assert compare_trajectories(a, b)
    c = a[:2] + [TrajectoryEvent(2, "response", {"body": "{ }"}, a[2].ts)] + a[3:]
    assert trajectory_digest(a) != trajectory_digest(c)
    eq = compare_trajectories(a, c)
    assert not eq and eq.first_difference == 2


def test_check_stream_rejects_truncated():
    events = small_run(MemorySink()).events
    with pytest.raises(MalformedStream):
        check_stream(events[:-1])
    with pytest.raises(MalformedStream):
        check_stream([])


def test_read_trajectory_reports_bad_line(tmp_path):
    path = tmp_path / "bad.traj.jsonl"
    path.write_text('{"seq":0,"kind":"run_start","payload":{},"ts":"t"}\n{oops\n')
    with pytest.raises(MalformedStream) as exc:
        read_trajectory(path)
    assert exc.value.position == 1


def test_tree_digests_skip_agent_dir_and_symlinks(tmp_path):
    (tmp_path / "a.txt").write_bytes(b"abc")
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "b").write_bytes(b"")
    (tmp_path / ".agent").mkdir()
    (tmp_path / ".agent" / "run.traj.jsonl").write_text("x")
    (tmp_path / "link").symlink_to(tmp_path / "a.txt")
    assert tree_digests(tmp_path) == {
        "a.txt": "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
        "d/b": "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
    }


def test_provenance_round_trip(tmp_path):
    events = small_run(MemorySink()).events
    (tmp_path / "f").write_text("z")
    rec = build_provenance(events, model="m", base_url="http://x", workdir=tmp_path)
    assert rec.hash == "sha256" and rec.trajectory_digest == trajectory_digest(events)
    assert ProvenanceRecord.read(rec.write(tmp_path / "p.json")) == rec
    with pytest.raises(TrajectoryError):
        build_provenance(events[:-1], model="m", base_url="http://x", workdir=tmp_path)
