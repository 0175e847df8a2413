"""Append-only run trajectories (``.traj.jsonl``) and provenance records."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from .chat_protocol import canonical_dumps, sha256_hex

KINDS = ("run_start", "request", "response", "tool_exec", "run_end")
HASH_NAME = "sha256"
ZERO_TS = "1970-01-01T00:00:00Z"
REDACTED = "[REDACTED]"
TRAJECTORY_SUFFIX = ".traj.jsonl"
PROVENANCE_NAME = "provenance.json"


class TrajectoryError(Exception):
    pass


class SequenceGap(TrajectoryError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected seq {expected}, got {got}")
        self.expected, self.got = expected, got


class SinkClosed(TrajectoryError):
    pass


class MalformedStream(TrajectoryError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed trajectory at position {position}: {reason}")
        self.position = position


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass(frozen=True)
class TrajectoryEvent:
    seq: int
    kind: str
    payload: dict[str, Any]
    ts: str = field(default_factory=utc_now)

    def to_dict(self) -> dict[str, Any]:
        return {"seq": self.seq, "kind": self.kind, "ts": self.ts, "payload": self.payload}

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "TrajectoryEvent":
        return cls(seq=obj["seq"], kind=obj["kind"], payload=obj["payload"], ts=obj.get("ts", ZERO_TS))


def scrub(value: Any, secrets: Sequence[str]) -> Any:
    """Replace every occurrence of each secret inside nested strings."""
    if not secrets:
        return value
    if isinstance(value, str):
        for secret in secrets:
            value = value.replace(secret, REDACTED)
        return value
    if isinstance(value, dict):
        return {scrub(k, secrets): scrub(v, secrets) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [scrub(v, secrets) for v in value]
    return value


class TrajectoryWriter:
    """One sink per run. Each event is flushed and fsynced before ``append_event`` returns."""

    def __init__(self, path: str | os.PathLike, secrets: Iterable[str] = ()):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.secrets = tuple(s for s in secrets if s)
        self.events: list[TrajectoryEvent] = []
        self.closed = False
        self._fh = self.path.open("w", encoding="utf-8")

    @property
    def next_seq(self) -> int:
        return len(self.events)

    def append_event(self, ev: TrajectoryEvent) -> TrajectoryEvent:
        if self.closed:
            raise SinkClosed(f"trajectory already ended: {self.path}")
        if ev.seq != self.next_seq:
            raise SequenceGap(self.next_seq, ev.seq)
        if ev.kind not in KINDS:
            raise TrajectoryError(f"unknown event kind {ev.kind!r}")
        if (ev.seq == 0) != (ev.kind == "run_start"):
            raise TrajectoryError("run_start must be the first event and only the first")
        ev = TrajectoryEvent(ev.seq, ev.kind, scrub(ev.payload, self.secrets), ev.ts)
        self._fh.write(json.dumps(ev.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self.events.append(ev)
        if ev.kind == "run_end":
            self.close()
        return ev

    def emit(self, kind: str, payload: dict[str, Any]) -> TrajectoryEvent:
        return self.append_event(TrajectoryEvent(self.next_seq, kind, payload))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._fh.close()


class MemorySink:
    """In-memory sink with the same contract, for embedding and tests."""

    def __init__(self, secrets: Iterable[str] = ()):
        self.secrets = tuple(s for s in secrets if s)
        self.events: list[TrajectoryEvent] = []
        self.closed = False

    def append_event(self, ev: TrajectoryEvent) -> TrajectoryEvent:
        if self.closed:
            raise SinkClosed("trajectory already ended")
        if ev.seq != len(self.events):
            raise SequenceGap(len(self.events), ev.seq)
        ev = TrajectoryEvent(ev.seq, ev.kind, scrub(ev.payload, self.secrets), ev.ts)
        self.events.append(ev)
        self.closed = ev.kind == "run_end"
        return ev

    def emit(self, kind: str, payload: dict[str, Any]) -> TrajectoryEvent:
        return self.append_event(TrajectoryEvent(len(self.events), kind, payload))


def read_trajectory(path: str | os.PathLike) -> list[TrajectoryEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                events.append(TrajectoryEvent.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedStream(lineno, str(exc)) from None
    return events


def check_stream(events: Sequence[TrajectoryEvent]) -> None:
    if not events:
        raise MalformedStream(0, "empty stream")
    for i, ev in enumerate(events):
        if ev.seq != i:
            raise MalformedStream(i, f"seq {ev.seq} out of order")
        if ev.kind not in KINDS:
            raise MalformedStream(i, f"unknown kind {ev.kind!r}")
        if (i == 0) != (ev.kind == "run_start"):
            raise MalformedStream(i, "run_start must open the stream")
        if ev.kind == "run_end" and i != len(events) - 1:
            raise MalformedStream(i, "events after run_end")
    if events[-1].kind != "run_end":
        raise MalformedStream(len(events) - 1, "stream does not end with run_end")


@dataclass(frozen=True)
class Equivalence:
    equivalent: bool
    first_difference: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.equivalent


def compare_trajectories(a: Sequence[TrajectoryEvent], b: Sequence[TrajectoryEvent]) -> Equivalence:
    """Compare two well-formed streams on (kind, payload); timestamps are ignored."""
    check_stream(a)
    check_stream(b)
    for ea, eb in zip(a, b):
        if ea.kind != eb.kind:
            return Equivalence(False, ea.seq, f"kind {ea.kind} != {eb.kind}")
        if canonical_dumps(ea.payload) != canonical_dumps(eb.payload):
            return Equivalence(False, ea.seq, f"{ea.kind} payload differs")
    if len(a) != len(b):
        return Equivalence(False, min(len(a), len(b)), "streams differ in length")
    return Equivalence(True)


def trajectory_digest(events: Sequence[TrajectoryEvent]) -> str:
    lines = [canonical_dumps(dict(ev.to_dict(), ts=ZERO_TS)) for ev in events]
    return sha256_hex("\n".join(lines))


def file_digest(path: str | os.PathLike) -> str:
    return sha256_hex(Path(path).read_bytes())


def tree_digests(root: str | os.PathLike, exclude: Iterable[str] = (".agent",)) -> dict[str, str]:
    """``relative/posix/path -> sha256`` for every regular file under ``root``.

    Top-level names in ``exclude`` are skipped. Symlinks are not followed.
    """
    root = Path(root)
    skip = set(exclude)
    out = {}
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = Path(dirpath).relative_to(root)
        if rel_dir == Path("."):
            dirnames[:] = [d for d in dirnames if d not in skip]
            filenames = [f for f in filenames if f not in skip]
        for name in filenames:
            path = Path(dirpath) / name
            if path.is_symlink() or not path.is_file():
                continue
            out[(rel_dir / name).as_posix()] = file_digest(path)
    return dict(sorted(out.items()))


@dataclass
class ProvenanceRecord:
    spec_digest: Optional[str]
    model: str
    base_url: str
    tool_catalog_digest: Optional[str]
    trajectory_digest: Optional[str]
    artifact_digests: dict[str, str]
    hash: str = HASH_NAME

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "ProvenanceRecord":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def catalog_digest(tools_wire: Any) -> str:
    return sha256_hex(canonical_dumps(tools_wire))


def tools_from_events(events: Sequence[TrajectoryEvent]) -> Optional[list]:
    """The tool catalog of the first recorded request, in wire form."""
    for ev in events:
        if ev.kind == "request":
            try:
                return json.loads(ev.payload["body"]).get("tools", [])
            except (KeyError, ValueError, AttributeError):
                return None
    return None


def build_provenance(events: Sequence[TrajectoryEvent], *, model: str, base_url: str, workdir,
                     spec_digest: Optional[str] = None,
                     exclude: Iterable[str] = (".agent",)) -> ProvenanceRecord:
    if not events or events[-1].kind != "run_end":
        raise TrajectoryError("provenance is only emitted after run_end")
    tools = tools_from_events(events)
    return ProvenanceRecord(
        spec_digest=spec_digest,
        model=model,
        base_url=base_url,
        tool_catalog_digest=catalog_digest(tools) if tools is not None else None,
        trajectory_digest=trajectory_digest(events),
        artifact_digests=tree_digests(workdir, exclude),
    )
