import os
import subprocess
import sys
from pathlib import Path

import pytest

from bootagent.conformance import AgentUnderTest, bundled_checks, child_env
from bootagent.toolbox import Sandbox

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
MUTANT = TESTS / "mutants" / "no_max_turns.py"

# The mutant has no --max-turns flag, so its template must not pass one.
MUTANT_LAUNCH = (f"{sys.executable} {MUTANT} --model {{MODEL}} --base-url {{BASE_URL}} "
                 f"--api-key {{API_KEY}} --cwd {{CWD}} {{TASK}}")


@pytest.fixture
def workdir(tmp_path):
    d = Path(os.path.realpath(tmp_path)) / "work"
    d.mkdir()
    return d


@pytest.fixture
def sandbox(workdir):
    return Sandbox(workdir, shell_timeout=5)


@pytest.fixture(scope="session")
def checks():
    return bundled_checks()


@pytest.fixture(scope="session")
def reference():
    return AgentUnderTest.reference()


@pytest.fixture(scope="session")
def mutant():
    return AgentUnderTest(MUTANT_LAUNCH, name="mutant")


def run_agent_cli(args, env=None, cwd=None, timeout=60):
    full_env = child_env()
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "bootagent", *args], env=full_env, cwd=cwd,
                          capture_output=True, text=True, timeout=timeout, stdin=subprocess.DEVNULL)


# Paths a model might use to leave the working directory. "{outside}" is an
# absolute directory next to the workdir; "link" and "filelink" are symlinks
# planted inside the workdir that point into it.
ESCAPE_CORPUS = [
    "../escaped.txt",
    "../../escaped.txt",
    "./../escaped.txt",
    "sub/../../escaped.txt",
    "a/b/../../../escaped.txt",
    "{outside}/escaped.txt",
    "link/escaped.txt",
    "filelink",
    "..\\escaped.txt",
    "sub\\..\\..\\escaped.txt",
    "sub/..\\../escaped.txt",
    "C:\\escaped.txt",
    "\\\\server\\share\\escaped.txt",
    "ok\x00../escaped.txt",
]


def plant_escape_links(workdir: Path) -> Path:
    outside = workdir.parent / "outside"
    outside.mkdir(exist_ok=True)
    (outside / "target.txt").write_text("outside\n")
    (workdir / "link").symlink_to(outside, target_is_directory=True)
    (workdir / "filelink").symlink_to(outside / "target.txt")
    return outside


def snapshot_outside(workdir: Path) -> dict[str, bytes]:
    """Every regular file under the workdir's parent, excluding the workdir itself."""
    out = {}
    for path in sorted(workdir.parent.rglob("*")):
        if workdir in path.parents or path == workdir or path.is_symlink() or not path.is_file():
            continue
        out[str(path)] = path.read_bytes()
    return out


SHIM = "from bootagent.cli import main\nraise SystemExit(main())\n"


def writer_script(files):
    """A mock generator run: one write_file call per file, then a final answer."""
    from bootagent.chat_protocol import ToolCall
    from bootagent.mock_server import Script, ScriptStep, calls, stop
    import json

    steps = [ScriptStep(calls(ToolCall(f"w{i}", "write_file", json.dumps({"path": name, "content": body}))))
             for i, (name, body) in enumerate(files.items())]
    return Script(tuple(steps) + (ScriptStep(stop("implementation written")),))


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion gate")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        # Parametrized criteria pass only if every case passes.
        if _CRITERIA.get(n, ("",))[0] != "FAIL":
            _CRITERIA[n] = (outcome, title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, title = _CRITERIA[n]
        terminalreporter.write_line(f"{outcome} criterion {n}: {title}")
