"""Entry point. Without a subcommand the program is the agent itself.

Subcommands: serve-mock, conform, diff, lint, bootstrap, fixed-point.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .agent_core import API_FAILURE, COMPLETED, DEFAULT_MAX_TURNS, AgentConfig, run_agent
from .llm_backend import BackendConfig, HttpBackend
from .toolbox import Sandbox
from .trajectory import PROVENANCE_NAME, TRAJECTORY_SUFFIX, TrajectoryWriter, build_provenance

PROG = "agent"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
SUBCOMMANDS = ("serve-mock", "conform", "diff", "lint", "bootstrap", "fixed-point")

EXIT_OK, EXIT_USAGE, EXIT_TURN_LIMIT, EXIT_API, EXIT_ENV = 0, 1, 2, 3, 4

log = logging.getLogger("bootagent")


class CliExit(Exception):
    def __init__(self, status: int, stdout: str = "", stderr: str = ""):
        super().__init__(stderr or stdout)
        self.status, self.stdout, self.stderr = status, stdout, stderr


class _Parser(argparse.ArgumentParser):
    """An argument parser that raises instead of printing and exiting."""

    def __init__(self, *args: Any, **kwargs: Any):
        # Fixed width: help text must not depend on the terminal.
        kwargs.setdefault("formatter_class", lambda prog: argparse.HelpFormatter(prog, width=80))
        super().__init__(*args, **kwargs)

    def print_help(self, file=None) -> None:
        raise CliExit(EXIT_OK, stdout=self.format_help())

    def exit(self, status: int = 0, message: Optional[str] = None) -> None:
        raise CliExit(status, stderr=message or "")

    def error(self, message: str) -> None:
        raise CliExit(EXIT_USAGE, stderr=f"{self.format_usage()}{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError
    return value


@dataclass(frozen=True)
class RunOption:
    flag: str
    dest: str
    env: tuple[str, ...]
    default: Any
    convert: Callable[[str], Any]
    help: str

    @property
    def metavar(self) -> str:
        return self.dest.upper()


RUN_OPTIONS = [
    RunOption("--model", "model", ("AGENT_MODEL",), None, str, "model identifier (required)"),
    RunOption("--base-url", "base_url", ("AGENT_BASE_URL",), DEFAULT_BASE_URL, str,
              f"chat-completions service root (default {DEFAULT_BASE_URL})"),
    RunOption("--api-key", "api_key", ("AGENT_API_KEY", "OPENAI_API_KEY"), "", str,
              "secret sent as a bearer token"),
    RunOption("--max-turns", "max_turns", ("AGENT_MAX_TURNS",), DEFAULT_MAX_TURNS, _positive_int,
              f"maximum model replies per run (default {DEFAULT_MAX_TURNS})"),
    RunOption("--cwd", "cwd", ("AGENT_CWD",), ".", str, "working directory (default: current directory)"),
]


@dataclass
class ParsedInvocation:
    subcommand: str
    options: Any
    sources: dict[str, str] = field(default_factory=dict)
    env: Mapping[str, str] = field(default_factory=dict)


def run_parser() -> _Parser:
    parser = _Parser(prog=PROG, description="A minimal coding agent: a loop of model calls and tool executions.")
    for opt in RUN_OPTIONS:
        parser.add_argument(opt.flag, dest=opt.dest, metavar=opt.metavar, default=None, help=opt.help)
    parser.add_argument("task", nargs="?", help="the task, in natural language")
    return parser


def _resolve_run(args: argparse.Namespace, env: Mapping[str, str], parser: _Parser) -> ParsedInvocation:
    values: dict[str, Any] = {}
    sources: dict[str, str] = {}
    for opt in RUN_OPTIONS:
        raw, source = getattr(args, opt.dest), "flag"
        if raw is None:
            raw = next((env[name] for name in opt.env if env.get(name)), None)
            source = "environment"
        if raw is None:
            values[opt.dest], sources[opt.dest] = opt.default, "default"
            continue
        try:
            values[opt.dest] = opt.convert(raw)
        except ValueError:
            origin = opt.flag if source == "flag" else opt.env[0]
            shown = "<hidden>" if opt.dest == "api_key" else repr(raw)
            parser.error(f"{origin}: invalid value {shown}")
        sources[opt.dest] = source
    if not values["model"]:
        raise CliExit(EXIT_USAGE, stderr=f"{PROG}: error: no model given; pass --model or set AGENT_MODEL\n")
    cfg = AgentConfig(
        model=values["model"],
        task=args.task,
        cwd=os.path.abspath(values["cwd"]),
        base_url=values["base_url"],
        api_key=values["api_key"],
        max_turns=values.get("max_turns", DEFAULT_MAX_TURNS),
    )
    return ParsedInvocation("run", cfg, sources, env)


def _add_report_json(p: argparse.ArgumentParser) -> None:
    p.add_argument("--report-json", metavar="PATH", help="also write the machine-readable report here")


def subcommand_parser(name: str) -> _Parser:
    p = _Parser(prog=f"{PROG} {name}")
    if name == "serve-mock":
        p.add_argument("--script", required=True, help="scripted responses (.script.json)")
        p.add_argument("--port", type=int, default=0, help="port to bind (0 picks a free one)")
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--log", metavar="PATH", help="write the request log as JSONL on shutdown")
    elif name == "conform":
        p.add_argument("--agent", help="agent command template (default: this program)")
        p.add_argument("--checks", help="check suite (.checks.json; default: bundled suite)")
        p.add_argument("--spec", help="spec document to report section coverage against")
        p.add_argument("--jobs", type=int, default=1)
        _add_report_json(p)
    elif name in ("diff", "fixed-point"):
        p.add_argument("--a", required=True, help="first agent command template")
        p.add_argument("--b", required=True, help="second agent command template")
        p.add_argument("--checks", help="check suite (default: bundled suite)")
        p.add_argument("--jobs", type=int, default=1)
        _add_report_json(p)
    elif name == "lint":
        p.add_argument("spec", nargs="?", help="spec document (default: the bundled spec of record)")
        p.add_argument("--config", help="lint config JSON")
        p.add_argument("--json", action="store_true", help="print the report as JSON")
    elif name == "bootstrap":
        p.add_argument("--spec", required=True)
        p.add_argument("--generator-cmd", required=True, help="generator agent command template")
        p.add_argument("--workdir", required=True)
        p.add_argument("--prompt", default=None)
        p.add_argument("--model", default=None, help="pinned model (default: AGENT_MODEL)")
        p.add_argument("--base-url", default=None)
        p.add_argument("--api-key", default=None)
        p.add_argument("--max-turns", type=int, default=DEFAULT_MAX_TURNS)
        p.add_argument("--records", help="directory for trajectory and provenance")
        p.add_argument("--checks", help="run this suite (or 'bundled') on the produced artifact")
    else:
        raise KeyError(name)
    return p


def parse_args(argv: Sequence[str], env: Mapping[str, str]) -> ParsedInvocation:
    argv = list(argv)
    if argv and argv[0] in SUBCOMMANDS:
        name = argv.pop(0)
        return ParsedInvocation(name, subcommand_parser(name).parse_args(argv), {}, env)
    parser = run_parser()
    args = parser.parse_args(argv)
    if not args.task:
        raise CliExit(EXIT_USAGE, stdout=parser.format_usage())
    return _resolve_run(args, env, parser)


def _run_id() -> str:
    return time.strftime("%Y%m%dT%H%M%SZ", time.gmtime()) + f"-{os.getpid()}"


def dispatch_run(cfg: AgentConfig, env: Mapping[str, str]) -> int:
    cwd = Path(cfg.cwd)
    if not cwd.is_dir():
        print(f"{PROG}: working directory does not exist: {cfg.cwd}", file=sys.stderr)
        return EXIT_ENV
    sandbox = Sandbox(cwd)
    override = env.get("AGENT_TRAJ_DIR")
    record_dir = Path(override).resolve() if override else sandbox.root / ".agent" / _run_id()
    try:
        writer = TrajectoryWriter(record_dir / f"run{TRAJECTORY_SUFFIX}", secrets=[cfg.api_key])
    except OSError as exc:
        print(f"{PROG}: cannot write trajectory: {exc}", file=sys.stderr)
        return EXIT_ENV
    backend = HttpBackend(BackendConfig(cfg.base_url, cfg.api_key))
    outcome = run_agent(cfg, backend, sandbox, writer)
    exclude = {".agent"}
    try:
        exclude.add(record_dir.relative_to(sandbox.root).parts[0])
    except (ValueError, IndexError):
        pass
    build_provenance(writer.events, model=cfg.model, base_url=cfg.base_url,
                     workdir=sandbox.root, exclude=exclude).write(record_dir / PROVENANCE_NAME)
    if outcome.status == COMPLETED:
        sys.stdout.write(outcome.final_text + "\n")
        sys.stdout.flush()
        return EXIT_OK
    if outcome.status == API_FAILURE:
        print(f"{PROG}: model service failure: {outcome.error}", file=sys.stderr)
        return EXIT_API
    print(f"{PROG}: turn limit reached after {outcome.turns_used} model replies", file=sys.stderr)
    return EXIT_TURN_LIMIT


def _write_json(path: Optional[str], obj: Any) -> None:
    if path:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _checks(path: Optional[str]):
    from .conformance import bundled_checks, load_checks

    return bundled_checks() if not path or path == "bundled" else load_checks(path)


def _agent(template: Optional[str]):
    from .conformance import AgentUnderTest

    return AgentUnderTest.reference() if not template else AgentUnderTest(template)


def dispatch_serve_mock(args: argparse.Namespace) -> int:
    from .mock_server import BindFailure, ScriptError, load_script_file, serve

    try:
        server = serve(load_script_file(args.script), args.host, args.port)
    except (OSError, ScriptError) as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, BindFailure) else 1
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"PORT={server.port}", flush=True)
    stop.wait()
    entries = server.shutdown()
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for e in entries:
                fh.write(json.dumps({"index": e.index, "path": e.path, "headers": e.headers,
                                     "body": e.body.decode("utf-8", errors="replace"), "error": e.error}) + "\n")
    return 0


def dispatch_conform(args: argparse.Namespace) -> int:
    from .conformance import HarnessFailure, UnknownSection, coverage_gaps, coverage_report, run_suite
    from .spec_tools import load_spec

    try:
        checks = _checks(args.checks)
        report = run_suite(_agent(args.agent), checks, jobs=args.jobs)
        print(report.render())
        payload = report.to_dict()
        gaps: list[str] = []
        if args.spec:
            coverage = coverage_report(checks, load_spec(args.spec))
            gaps = coverage_gaps(coverage)
            payload["spec_coverage"] = coverage
            payload["gaps"] = gaps
            for tag, count in coverage.items():
                print(f"  section {tag}: {count} check(s){'  GAP' if count == 0 else ''}")
    except (HarnessFailure, UnknownSection, ValueError, OSError) as exc:
        print(f"{PROG} conform: harness failure: {exc}", file=sys.stderr)
        return 2
    _write_json(args.report_json, payload)
    return 0 if report.all_passed and not gaps else 1


def dispatch_diff(args: argparse.Namespace) -> int:
    from .conformance import HarnessFailure, compare_agents

    try:
        report = compare_agents(_agent(args.a), _agent(args.b), _checks(args.checks), jobs=args.jobs)
    except (HarnessFailure, ValueError, OSError) as exc:
        print(f"{PROG} diff: harness failure: {exc}", file=sys.stderr)
        return 2
    print(report.render())
    _write_json(args.report_json, report.to_dict())
    return 0 if report.empty else 1


def dispatch_fixed_point(args: argparse.Namespace) -> int:
    from .bootstrap import verify_fixed_point
    from .conformance import HarnessFailure

    try:
        verdict = verify_fixed_point(_agent(args.a), _agent(args.b), _checks(args.checks), jobs=args.jobs)
    except (HarnessFailure, ValueError, OSError) as exc:
        print(f"{PROG} fixed-point: harness failure: {exc}", file=sys.stderr)
        return 2
    print(verdict.render())
    _write_json(args.report_json, verdict.to_dict())
    return 0 if verdict.holds else 1


def dispatch_lint(args: argparse.Namespace) -> int:
    from .spec_tools import LintConfig, bundled_spec, lint_spec, load_spec

    doc = load_spec(args.spec) if args.spec else bundled_spec()
    config = LintConfig.from_file(args.config) if args.config else LintConfig()
    report = lint_spec(doc, config)
    print(report.to_json() if args.json else report.render())
    return 0 if report.passed else 1


def dispatch_bootstrap(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    from .bootstrap import DEFAULT_PROMPT, BootstrapError, GenerationJob, generate_implementation
    from .conformance import HarnessFailure, run_suite

    model = args.model or env.get("AGENT_MODEL")
    if not model:
        print(f"{PROG} bootstrap: no pinned model; pass --model or set AGENT_MODEL", file=sys.stderr)
        return 2
    job = GenerationJob(
        spec_path=Path(args.spec),
        generator=_agent(args.generator_cmd),
        workdir=Path(args.workdir),
        pinned_model=model,
        prompt=args.prompt or DEFAULT_PROMPT,
        base_url=args.base_url or env.get("AGENT_BASE_URL") or DEFAULT_BASE_URL,
        api_key=args.api_key or env.get("AGENT_API_KEY") or env.get("OPENAI_API_KEY") or "",
        max_turns=args.max_turns,
        records_dir=Path(args.records) if args.records else None,
    )
    try:
        artifact = generate_implementation(job)
    except BootstrapError as exc:
        print(f"{PROG} bootstrap: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"{PROG} bootstrap: harness failure: {exc}", file=sys.stderr)
        return 2
    print(f"artifact: {artifact.entry_path}")
    print(f"launch: {artifact.launch}")
    print(f"provenance: {artifact.provenance_path}")
    if args.checks:
        try:
            report = run_suite(artifact.agent, _checks(args.checks))
        except HarnessFailure as exc:
            print(f"{PROG} bootstrap: harness failure: {exc}", file=sys.stderr)
            return 2
        print(report.render())
        print(f"pass ratio: {report.pass_ratio:.3f}")
    return 0


def dispatch(inv: ParsedInvocation) -> int:
    if inv.subcommand == "run":
        return dispatch_run(inv.options, inv.env)
    if inv.subcommand == "bootstrap":
        return dispatch_bootstrap(inv.options, inv.env)
    handler = {
        "serve-mock": dispatch_serve_mock,
        "conform": dispatch_conform,
        "diff": dispatch_diff,
        "fixed-point": dispatch_fixed_point,
        "lint": dispatch_lint,
    }[inv.subcommand]
    return handler(inv.options)


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format=f"{PROG}: %(message)s", stream=sys.stderr)
    try:
        inv = parse_args(sys.argv[1:] if argv is None else argv, os.environ if env is None else env)
    except CliExit as exc:
        if exc.stdout:
            sys.stdout.write(exc.stdout)
            sys.stdout.flush()
        if exc.stderr:
            sys.stderr.write(exc.stderr)
        return exc.status
    return dispatch(inv)
