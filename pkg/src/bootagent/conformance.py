"""Black-box conformance checks for any agent command, and the two-agent divergence differ.

An agent under test is a command template. Each check gets a fresh working
directory and a fresh mock model endpoint, launches the agent once, and then
asserts over the exit status, stdout, the endpoint's request log and the files
left in the working directory. Nothing about the agent's source is inspected.
"""

from __future__ import annotations

import json
import os
import re
import shlex
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .mock_server import BindFailure, LogEntry, RequestLog, Script, script_from_wire, script_to_wire, serve
from .spec_tools import SpecDocument
from .trajectory import sha256_hex, tree_digests

PLACEHOLDERS = ("TASK", "MODEL", "BASE_URL", "API_KEY", "MAX_TURNS", "CWD")
STANDARD_ARGS = "--model {MODEL} --base-url {BASE_URL} --api-key {API_KEY} --max-turns {MAX_TURNS} --cwd {CWD} {TASK}"
INVOCATIONS = ("run", "help", "bare")
# Child processes must not inherit the caller's agent configuration.
SCRUBBED_ENV_PREFIXES = ("AGENT_",)
SCRUBBED_ENV_VARS = ("OPENAI_API_KEY", "OPENAI_BASE_URL")
FLAG_RE = re.compile(r"(?<![\w-])--?[A-Za-z][\w-]*")


class HarnessFailure(Exception):
    """The harness itself could not run a check (as opposed to the agent failing it)."""


class UnknownSection(KeyError):
    def __init__(self, check_id: str, section: str):
        super().__init__(f"check {check_id!r} names unknown section {section!r}")
        self.check_id, self.section = check_id, section


@dataclass(frozen=True)
class AgentUnderTest:
    """A command template. A template without placeholders is a bare program and
    gets the standard flag surface appended."""

    launch: str
    name: str = ""

    def __post_init__(self) -> None:
        launch = self.launch.strip()
        if not any("{" + p + "}" in launch for p in PLACEHOLDERS):
            launch = f"{launch} {STANDARD_ARGS}"
        if "{BASE_URL}" not in launch or "{TASK}" not in launch:
            raise ValueError("launch template needs {BASE_URL} and {TASK} placeholders")
        object.__setattr__(self, "launch", launch)
        if not self.name:
            object.__setattr__(self, "name", launch.split()[0] if launch.split() else launch)

    @classmethod
    def reference(cls) -> "AgentUnderTest":
        return cls(f"{shlex.quote(sys.executable)} -m bootagent {STANDARD_ARGS}", name="reference")

    @property
    def tokens(self) -> list[str]:
        return shlex.split(self.launch)

    @property
    def program_argv(self) -> list[str]:
        """The template with every placeholder-bearing argument stripped."""
        tokens = self.tokens
        for i, tok in enumerate(tokens):
            if "{" in tok and any("{" + p + "}" in tok for p in PLACEHOLDERS):
                if i > 0 and tokens[i - 1].startswith("--") and "=" not in tokens[i - 1]:
                    return tokens[: i - 1]
                return tokens[:i]
        return tokens

    def argv(self, values: dict[str, str]) -> list[str]:
        out = []
        for tok in self.tokens:
            for key in PLACEHOLDERS:
                tok = tok.replace("{" + key + "}", values.get(key, ""))
            out.append(tok)
        return out


@dataclass(frozen=True)
class ConformanceCheck:
    id: str
    spec_section: str
    script: Script
    task: str = "do the task"
    invocation: str = "run"
    max_turns: int = 40
    model: str = "conformance-model"
    api_key: str = "sk-conformance-7f3a9c"
    expectations: tuple[dict[str, Any], ...] = ()
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.invocation not in INVOCATIONS:
            raise ValueError(f"{self.id}: invocation must be one of {INVOCATIONS}")
        if not self.spec_section:
            raise ValueError(f"{self.id}: every check names one spec_section")
        object.__setattr__(self, "expectations", tuple(self.expectations))
        for exp in self.expectations:
            if len(exp) != 1 or next(iter(exp)) not in EXPECTATIONS:
                raise ValueError(f"{self.id}: unknown expectation {exp!r}")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "ConformanceCheck":
        fields = {k: obj[k] for k in ("task", "invocation", "max_turns", "model", "api_key", "timeout") if k in obj}
        return cls(
            id=obj["id"],
            spec_section=obj["spec_section"],
            script=script_from_wire(obj.get("script", {"steps": [], "on_exhausted": {"final_stop": ""}})),
            expectations=tuple(obj.get("expectations", ())),
            **fields,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "spec_section": self.spec_section,
            "invocation": self.invocation,
            "task": self.task,
            "max_turns": self.max_turns,
            "model": self.model,
            "api_key": self.api_key,
            "timeout": self.timeout,
            "script": script_to_wire(self.script),
            "expectations": list(self.expectations),
        }


def load_checks(path: str | Path) -> list[ConformanceCheck]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [ConformanceCheck.from_dict(obj) for obj in raw]


def bundled_checks() -> list[ConformanceCheck]:
    text = resources.files("bootagent").joinpath("data/conformance.checks.json").read_text(encoding="utf-8")
    return [ConformanceCheck.from_dict(obj) for obj in json.loads(text)]


def dump_checks(checks: Sequence[ConformanceCheck]) -> str:
    return json.dumps([c.to_dict() for c in checks], indent=2, ensure_ascii=False) + "\n"


@dataclass
class Run:
    """Raw result of launching the agent once for a check."""

    check: ConformanceCheck
    workdir: Path
    values: dict[str, str]
    exit_status: Optional[int]
    stdout: str
    stderr: str
    log: RequestLog
    timed_out: bool = False


class ExpectationFailed(AssertionError):
    pass


def _subst(value: Any, values: dict[str, str]) -> Any:
    if isinstance(value, str):
        for key, repl in values.items():
            value = value.replace("{" + key + "}", repl)
        return value
    if isinstance(value, list):
        return [_subst(v, values) for v in value]
    if isinstance(value, dict):
        return {k: _subst(v, values) for k, v in value.items()}
    return value


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ExpectationFailed(message)


def _entry(run: Run, index: int) -> LogEntry:
    _require(index < len(run.log), f"expected request {index}, only {len(run.log)} logged")
    entry = run.log[index]
    _require(entry.request is not None, f"request {index} is not a well-formed chat request: {entry.error}")
    return entry


def _all_requests(run: Run) -> list[LogEntry]:
    _require(len(run.log) > 0, "no requests reached the model endpoint")
    return [_entry(run, i) for i in range(len(run.log))]


def _x_exit_status(run: Run, want: int) -> None:
    _require(run.exit_status == want, f"exit status {run.exit_status}, expected {want}")


def _x_stdout_equals(run: Run, want: str) -> None:
    _require(run.stdout == want, f"stdout {run.stdout[:120]!r}, expected {want!r}")


def _x_stdout_empty(run: Run, want: bool) -> None:
    _require((run.stdout == "") == want, f"stdout {run.stdout[:120]!r}, expected it empty={want}")


def _x_stdout_contains(run: Run, tokens: list[str]) -> None:
    text = run.stdout.lower()
    missing = [t for t in tokens if t.lower() not in text]
    _require(not missing, f"stdout lacks {missing}")


def _x_request_count(run: Run, want: int) -> None:
    _require(len(run.log) == want, f"{len(run.log)} requests logged, expected {want}")


def _x_request_path(run: Run, want: str) -> None:
    for entry in _all_requests(run):
        _require(entry.path.split("?")[0] == want, f"request {entry.index} went to {entry.path!r}")


def _x_request_roles(run: Run, spec: dict[str, Any]) -> None:
    roles = [m.role for m in _entry(run, spec["index"]).request.messages]
    _require(roles == spec["roles"], f"request {spec['index']} roles {roles}, expected {spec['roles']}")


def _x_request_message(run: Run, spec: dict[str, Any]) -> None:
    msgs = _entry(run, spec["index"]).request.messages
    pos = spec["position"]
    _require(pos < len(msgs), f"request {spec['index']} has no message {pos}")
    msg = msgs[pos]
    if "role" in spec:
        _require(msg.role == spec["role"], f"message {pos} role {msg.role!r}, expected {spec['role']!r}")
    if "content" in spec:
        _require(msg.content == spec["content"], f"message {pos} content {str(msg.content)[:80]!r}")
    for needle in spec.get("contains", ()):
        _require(needle in (msg.content or ""), f"message {pos} lacks {needle!r}")


def _x_request_model(run: Run, want: str) -> None:
    for entry in _all_requests(run):
        _require(entry.request.model == want, f"request {entry.index} model {entry.request.model!r}")


def _x_request_header(run: Run, spec: dict[str, str]) -> None:
    for entry in _all_requests(run):
        got = entry.header(spec["name"])
        want = spec["value"]
        ok = got is not None and (got == want if spec.get("exact", True) else want in got)
        _require(ok, f"request {entry.index} header {spec['name']} is {got!r}, expected {want!r}")


def _x_request_tools(run: Run, names: list[str]) -> None:
    for entry in _all_requests(run):
        got = sorted(t.name for t in entry.request.tools)
        _require(got == sorted(names), f"request {entry.index} offers tools {got}")


def _x_prefix_growth(run: Run, want: bool) -> None:
    entries = _all_requests(run)
    for prev, nxt in zip(entries, entries[1:]):
        a, b = prev.request.messages, nxt.request.messages
        _require(len(b) > len(a) and b[: len(a)] == a,
                 f"request {nxt.index} does not extend request {prev.index}")


def _x_tool_reply(run: Run, spec: dict[str, Any]) -> None:
    msgs = _entry(run, spec["request"]).request.messages
    replies = [m for m in msgs if m.role == "tool" and m.tool_call_id == spec["tool_call_id"]]
    _require(len(replies) == 1, f"request {spec['request']} has {len(replies)} replies to {spec['tool_call_id']}")
    content = replies[0].content or ""
    if "startswith" in spec:
        _require(content.startswith(spec["startswith"]), f"reply {content[:80]!r} does not start {spec['startswith']!r}")
    for needle in spec.get("contains", ()):
        _require(needle in content, f"reply {content[:80]!r} lacks {needle!r}")


def _x_file_content(run: Run, spec: dict[str, str]) -> None:
    path = run.workdir / spec["path"]
    _require(path.is_file(), f"file {spec['path']} was not created")
    got = path.read_bytes()
    _require(got == spec["content"].encode("utf-8"), f"file {spec['path']} holds {got[:80]!r}")


def _x_path_absent(run: Run, rel: str) -> None:
    path = Path(os.path.normpath(run.workdir / rel))
    _require(not os.path.lexists(path), f"{rel} exists: the agent wrote outside its working directory")


EXPECTATIONS: dict[str, Callable[[Run, Any], None]] = {
    name[3:]: fn for name, fn in list(globals().items()) if name.startswith("_x_")
}


def child_env() -> dict[str, str]:
    env = {k: v for k, v in os.environ.items()
           if not k.startswith(SCRUBBED_ENV_PREFIXES) and k not in SCRUBBED_ENV_VARS}
    env["PYTHONUNBUFFERED"] = "1"
    return env


def launch_check(agent: AgentUnderTest, check: ConformanceCheck, workdir: Path) -> Run:
    try:
        server = serve(check.script)
    except BindFailure as exc:
        raise HarnessFailure(str(exc)) from exc
    values = {
        "TASK": check.task,
        "MODEL": check.model,
        "BASE_URL": server.url,
        "API_KEY": check.api_key,
        "MAX_TURNS": str(check.max_turns),
        "CWD": str(workdir),
        "WORKDIR": str(workdir),
    }
    if check.invocation == "run":
        argv = agent.argv(values)
    elif check.invocation == "help":
        argv = agent.program_argv + ["-h"]
    else:
        argv = agent.program_argv
    exit_status, out, err, timed_out = None, b"", b"", False
    with server:
        try:
            proc = subprocess.run(argv, cwd=workdir, env=child_env(), stdin=subprocess.DEVNULL,
                                  capture_output=True, timeout=check.timeout)
            exit_status, out, err = proc.returncode, proc.stdout, proc.stderr
        except subprocess.TimeoutExpired as exc:
            timed_out, out, err = True, exc.stdout or b"", exc.stderr or b""
        except (FileNotFoundError, PermissionError, IndexError) as exc:
            # Unlaunchable agents fail checks; they are not harness failures.
            exit_status, err = 127, str(exc).encode()
    return Run(check, workdir, values, exit_status, out.decode("utf-8", errors="replace"),
               err.decode("utf-8", errors="replace"), server.log, timed_out)


def normalize_text(text: str, workdir: Optional[Path] = None) -> str:
    if workdir is not None:
        for form in sorted({str(workdir), os.path.realpath(workdir)}, key=len, reverse=True):
            text = text.replace(form, "WORKDIR")
    text = re.sub(r"(?i)(usage:\s*)(\S+)", r"\1PROG", text)
    return " ".join(text.split())


def usage_tokens(text: str) -> list[str]:
    tokens = set(FLAG_RE.findall(text))
    if re.search(r"(?<![\w-])task(?![\w-])", text, re.IGNORECASE):
        tokens.add("task")
    return sorted(tokens)


def observe(run: Run) -> dict[str, Any]:
    """The observable behaviour compared across implementations."""
    obs: dict[str, Any] = {"exit_status": "timeout" if run.timed_out else run.exit_status}
    if run.check.invocation == "run":
        obs["stdout"] = normalize_text(run.stdout, run.workdir)
    else:
        obs["usage_tokens"] = usage_tokens(normalize_text(run.stdout, run.workdir))
    obs["request_count"] = len(run.log)
    obs["request_roles"] = [
        [m.role for m in e.request.messages] if e.request is not None else ["<malformed>"] for e in run.log
    ]
    obs["files"] = tree_digests(run.workdir)
    return obs


@dataclass
class CheckVerdict:
    check_id: str
    spec_section: str
    passed: bool
    failure: Optional[str]
    observables: dict[str, Any]
    stderr_tail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "check_id": self.check_id,
            "spec_section": self.spec_section,
            "passed": self.passed,
            "failure": self.failure,
            "observables": self.observables,
        }


def run_check(agent: AgentUnderTest, check: ConformanceCheck) -> CheckVerdict:
    with tempfile.TemporaryDirectory(prefix="conform-") as tmp:
        workdir = Path(os.path.realpath(tmp)) / "work"
        workdir.mkdir()
        run = launch_check(agent, check, workdir)
        failure = None
        if run.timed_out:
            failure = f"agent did not finish within {check.timeout:g}s"
        else:
            for exp in check.expectations:
                (name, arg), = exp.items()
                try:
                    EXPECTATIONS[name](run, _subst(arg, run.values))
                except ExpectationFailed as exc:
                    failure = f"{name}: {exc}"
                    break
        return CheckVerdict(check.id, check.spec_section, failure is None, failure, observe(run),
                            run.stderr[-2000:])


@dataclass
class ConformanceReport:
    agent: str
    verdicts: list[CheckVerdict]
    coverage: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> int:
        return sum(v.passed for v in self.verdicts)

    @property
    def pass_ratio(self) -> float:
        return self.passed / len(self.verdicts) if self.verdicts else 0.0

    @property
    def all_passed(self) -> bool:
        return bool(self.verdicts) and all(v.passed for v in self.verdicts)

    def verdict(self, check_id: str) -> CheckVerdict:
        for v in self.verdicts:
            if v.check_id == check_id:
                return v
        raise KeyError(check_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent": self.agent,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "coverage": self.coverage,
            "summary": {"passed": self.passed, "total": len(self.verdicts), "pass_ratio": self.pass_ratio},
        }

    def render(self) -> str:
        lines = [f"conformance: {self.agent}"]
        for v in self.verdicts:
            mark = "PASS" if v.passed else "FAIL"
            lines.append(f"  {mark} {v.check_id} [{v.spec_section}]" + ("" if v.passed else f": {v.failure}"))
        lines.append(f"{self.passed}/{len(self.verdicts)} checks passed")
        return "\n".join(lines)


def run_suite(agent: AgentUnderTest, checks: Sequence[ConformanceCheck], jobs: int = 1) -> ConformanceReport:
    if not checks:
        raise ValueError("run_suite needs at least one check")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            verdicts = list(pool.map(lambda c: run_check(agent, c), checks))
    else:
        verdicts = [run_check(agent, c) for c in checks]
    coverage: dict[str, int] = {}
    for c in checks:
        coverage[c.spec_section] = coverage.get(c.spec_section, 0) + 1
    return ConformanceReport(agent.name, verdicts, coverage)


@dataclass
class CheckDivergence:
    check_id: str
    passed_a: bool
    passed_b: bool
    diffs: dict[str, tuple[Any, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"check_id": self.check_id, "passed_a": self.passed_a, "passed_b": self.passed_b,
                "diffs": {k: list(v) for k, v in self.diffs.items()}}


@dataclass
class DivergenceReport:
    agent_a: str
    agent_b: str
    entries: list[CheckDivergence]
    report_a: Optional[ConformanceReport] = None
    report_b: Optional[ConformanceReport] = None

    @property
    def empty(self) -> bool:
        return not self.entries

    def __bool__(self) -> bool:
        return not self.empty

    @property
    def check_ids(self) -> list[str]:
        return [e.check_id for e in self.entries]

    def to_dict(self) -> dict[str, Any]:
        return {"agent_a": self.agent_a, "agent_b": self.agent_b,
                "divergent": [e.to_dict() for e in self.entries]}

    def render(self) -> str:
        if self.empty:
            return f"no divergence between {self.agent_a} and {self.agent_b}"
        lines = [f"divergence between {self.agent_a} and {self.agent_b}:"]
        for e in self.entries:
            verdicts = f"{'pass' if e.passed_a else 'fail'}/{'pass' if e.passed_b else 'fail'}"
            lines.append(f"  {e.check_id} ({verdicts}): {', '.join(sorted(e.diffs)) or 'verdict only'}")
        return "\n".join(lines)


def diff_reports(a: ConformanceReport, b: ConformanceReport) -> DivergenceReport:
    by_id = {v.check_id: v for v in b.verdicts}
    entries = []
    for va in a.verdicts:
        vb = by_id.get(va.check_id)
        if vb is None:
            entries.append(CheckDivergence(va.check_id, va.passed, False, {"missing": (True, False)}))
            continue
        keys = sorted(set(va.observables) | set(vb.observables))
        diffs = {k: (va.observables.get(k), vb.observables.get(k)) for k in keys
                 if va.observables.get(k) != vb.observables.get(k)}
        if diffs or va.passed != vb.passed:
            entries.append(CheckDivergence(va.check_id, va.passed, vb.passed, diffs))
    return DivergenceReport(a.agent, b.agent, entries, a, b)


def compare_agents(a: AgentUnderTest, b: AgentUnderTest, checks: Sequence[ConformanceCheck],
                   jobs: int = 1) -> DivergenceReport:
    return diff_reports(run_suite(a, checks, jobs), run_suite(b, checks, jobs))


def coverage_report(checks: Sequence[ConformanceCheck], spec: SpecDocument) -> dict[str, int]:
    known = spec.tags
    counts = {tag: 0 for tag in known}
    for c in checks:
        if c.spec_section not in counts:
            raise UnknownSection(c.id, c.spec_section)
        counts[c.spec_section] += 1
    return counts


def coverage_gaps(coverage: dict[str, int]) -> list[str]:
    return [tag for tag, n in coverage.items() if n == 0]


def report_digest(report: ConformanceReport) -> str:
    return sha256_hex(json.dumps(report.to_dict(), sort_keys=True))
