"""Generate an agent from a spec with a generator agent, and check the bootstrap fixed point.

The fixed point is equivalence under the check suite (both agents pass every
check and no observable diverges), never byte equality of the programs.
"""

from __future__ import annotations

import fnmatch
import shlex
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from .conformance import (
    STANDARD_ARGS, AgentUnderTest, ConformanceCheck, ConformanceReport, DivergenceReport, child_env, diff_reports,
    run_suite,
)
from .trajectory import (
    PROVENANCE_NAME, TRAJECTORY_SUFFIX, ProvenanceRecord, catalog_digest, file_digest, read_trajectory,
    tools_from_events, trajectory_digest, tree_digests,
)

DEFAULT_PROMPT = "implement the specification document in this directory as a single python file"


class BootstrapError(Exception):
    pass


class GeneratorFailed(BootstrapError):
    def __init__(self, exit_status: Optional[int], stderr: str):
        super().__init__(f"generator exited with status {exit_status}: {stderr[-500:].strip()}")
        self.exit_status, self.stderr = exit_status, stderr


class NoArtifactProduced(BootstrapError):
    pass


class AmbiguousArtifact(BootstrapError):
    def __init__(self, candidates: list[str]):
        super().__init__(f"several candidate entry files: {', '.join(candidates)}")
        self.candidates = candidates


def entry_pattern_for(prompt: str) -> str:
    return "*.py" if "python" in prompt.lower() else "*"


@dataclass
class GenerationJob:
    spec_path: Path
    generator: AgentUnderTest
    workdir: Path
    pinned_model: str
    prompt: str = DEFAULT_PROMPT
    base_url: str = "https://api.openai.com/v1"
    api_key: str = ""
    max_turns: int = 40
    records_dir: Optional[Path] = None
    entry_pattern: Optional[str] = None
    timeout: float = 3600.0

    def __post_init__(self) -> None:
        if not self.pinned_model:
            raise ValueError("pinned_model must be non-empty")
        self.spec_path, self.workdir = Path(self.spec_path), Path(self.workdir).absolute()
        if self.records_dir is None:
            self.records_dir = self.workdir.parent / f"{self.workdir.name}.records"
        if self.entry_pattern is None:
            self.entry_pattern = entry_pattern_for(self.prompt)


@dataclass
class AgentArtifact:
    entry_path: Path
    launch: str
    provenance: ProvenanceRecord
    provenance_path: Optional[Path] = None

    @property
    def agent(self) -> AgentUnderTest:
        return AgentUnderTest(self.launch, name=self.entry_path.name)


def derive_launch(entry: Path) -> str:
    if entry.suffix == ".py":
        return f"{shlex.quote(sys.executable)} {shlex.quote(str(entry))} {STANDARD_ARGS}"
    return f"{shlex.quote(str(entry))} {STANDARD_ARGS}"


def _check_empty(path: Path, what: str) -> None:
    if path.exists() and any(path.iterdir()):
        raise ValueError(f"{what} must be empty at start: {path}")


def generate_implementation(job: GenerationJob) -> AgentArtifact:
    spec_bytes = job.spec_path.read_bytes()
    _check_empty(job.workdir, "workdir")
    _check_empty(job.records_dir, "records directory")
    job.workdir.mkdir(parents=True, exist_ok=True)
    job.records_dir.mkdir(parents=True, exist_ok=True)
    spec_copy = job.workdir / job.spec_path.name
    spec_copy.write_bytes(spec_bytes)

    values = {
        "TASK": job.prompt,
        "MODEL": job.pinned_model,
        "BASE_URL": job.base_url,
        "API_KEY": job.api_key,
        "MAX_TURNS": str(job.max_turns),
        "CWD": str(job.workdir),
    }
    env = child_env()
    env["AGENT_TRAJ_DIR"] = str(job.records_dir)
    try:
        proc = subprocess.run(job.generator.argv(values), cwd=job.workdir, env=env, stdin=subprocess.DEVNULL,
                              capture_output=True, timeout=job.timeout)
    except subprocess.TimeoutExpired as exc:
        raise GeneratorFailed(None, f"timed out after {job.timeout:g}s") from exc
    except (FileNotFoundError, PermissionError) as exc:
        raise GeneratorFailed(None, str(exc)) from exc
    if proc.returncode != 0:
        raise GeneratorFailed(proc.returncode, proc.stderr.decode("utf-8", errors="replace"))

    candidates = sorted(
        p.name for p in job.workdir.iterdir()
        if p.is_file() and not p.name.startswith(".") and p.name != spec_copy.name
        and fnmatch.fnmatch(p.name, job.entry_pattern)
    )
    if not candidates:
        raise NoArtifactProduced(f"no new file matching {job.entry_pattern!r} in {job.workdir}")
    if len(candidates) > 1:
        raise AmbiguousArtifact(candidates)
    entry = job.workdir / candidates[0]
    if entry.stat().st_size == 0:
        raise NoArtifactProduced(f"{entry.name} is empty")

    traj_path = job.records_dir / f"run{TRAJECTORY_SUFFIX}"
    events = read_trajectory(traj_path) if traj_path.exists() else None
    tools = tools_from_events(events) if events else None
    record = ProvenanceRecord(
        spec_digest=file_digest(job.spec_path),
        model=job.pinned_model,
        base_url=job.base_url,
        tool_catalog_digest=catalog_digest(tools) if tools is not None else None,
        trajectory_digest=trajectory_digest(events) if events else None,
        artifact_digests=tree_digests(job.workdir),
    )
    record_path = record.write(job.records_dir / PROVENANCE_NAME)
    return AgentArtifact(entry, derive_launch(entry), record, record_path)


@dataclass
class FixedPointVerdict:
    holds: bool
    report_a: ConformanceReport
    report_b: ConformanceReport
    divergence: DivergenceReport
    reasons: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.holds

    def to_dict(self) -> dict[str, Any]:
        return {
            "holds": self.holds,
            "reasons": self.reasons,
            "report_a": self.report_a.to_dict(),
            "report_b": self.report_b.to_dict(),
            "divergence": self.divergence.to_dict(),
        }

    def render(self) -> str:
        head = "fixed point holds" if self.holds else "fixed point fails: " + "; ".join(self.reasons)
        return "\n".join([head, self.report_a.render(), self.report_b.render(), self.divergence.render()])


AgentLike = Union[AgentArtifact, AgentUnderTest]


def _as_agent(a: AgentLike) -> AgentUnderTest:
    return a.agent if isinstance(a, AgentArtifact) else a


def verify_fixed_point(a0: AgentLike, a1: AgentLike, checks: Sequence[ConformanceCheck],
                       jobs: int = 1) -> FixedPointVerdict:
    ra = run_suite(_as_agent(a0), checks, jobs)
    rb = run_suite(_as_agent(a1), checks, jobs)
    divergence = diff_reports(ra, rb)
    reasons = []
    if not ra.all_passed:
        reasons.append(f"{ra.agent} fails {len(ra.verdicts) - ra.passed} check(s)")
    if not rb.all_passed:
        reasons.append(f"{rb.agent} fails {len(rb.verdicts) - rb.passed} check(s)")
    if not divergence.empty:
        reasons.append(f"divergent on {', '.join(divergence.check_ids)}")
    return FixedPointVerdict(not reasons, ra, rb, divergence, reasons)
