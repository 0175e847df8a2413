"""Parse a specification document and lint it for size, reading time, abstraction and structure."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

SECTION_RE = re.compile(r"^##[ \t]+([A-Za-z0-9][\w-]*)[ \t]*:[ \t]*(.*?)[ \t]*$")
MARKUP_RE = re.compile(r"^[ \t]*(?:#+|[-*+])[ \t]+")
WORD_RE = re.compile(r"\S+", re.ASCII)
SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+", re.ASCII)
BLOCK_START_RE = re.compile(r"^[ \t]*(?:#+|[-*+]|\d+\.)[ \t]+")

DEFAULT_MAX_WORDS = 1500
DEFAULT_WPM = 200
MAX_READING_MINUTES = 15


def _lines(text: str) -> list[str]:
    return text.split("\n")


def count_words(text: str) -> int:
    """Whitespace-separated tokens after stripping leading heading markers and bullets."""
    return sum(len(WORD_RE.findall(MARKUP_RE.sub("", line, count=1))) for line in _lines(text))


@dataclass(frozen=True)
class Section:
    tag: str
    heading: str
    body: str
    line: int  # 1-based line of the heading


@dataclass
class SpecDocument:
    source: str
    sections: list[Section] = field(default_factory=list)
    preface: str = ""
    path: Optional[str] = None

    @property
    def word_count(self) -> int:
        return count_words(self.source)

    @property
    def tags(self) -> list[str]:
        return [s.tag for s in self.sections]

    def section(self, tag: str) -> Section:
        for s in self.sections:
            if s.tag == tag:
                return s
        raise KeyError(tag)


def parse_spec(source: str, path: Optional[str] = None) -> SpecDocument:
    sections: list[Section] = []
    preface: list[str] = []
    current: Optional[tuple[str, str, int]] = None
    body: list[str] = []
    for lineno, line in enumerate(_lines(source), start=1):
        m = SECTION_RE.match(line)
        if m:
            if current:
                sections.append(Section(current[0], current[1], "\n".join(body).strip("\n"), current[2]))
            current, body = (m.group(1), m.group(2), lineno), []
        elif current:
            body.append(line)
        else:
            preface.append(line)
    if current:
        sections.append(Section(current[0], current[1], "\n".join(body).strip("\n"), current[2]))
    return SpecDocument(source, sections, "\n".join(preface), path)


def load_spec(path: str | Path) -> SpecDocument:
    return parse_spec(Path(path).read_text(encoding="utf-8"), str(path))


def bundled_spec_text() -> str:
    return resources.files("bootagent").joinpath("data/agent_spec.md").read_text(encoding="utf-8")


def bundled_spec() -> SpecDocument:
    return parse_spec(bundled_spec_text(), "agent_spec.md")


def word_count(doc: SpecDocument) -> int:
    return doc.word_count


def parse_denylist(text: str) -> list[str]:
    terms = []
    for line in _lines(text):
        line = line.strip().lower()
        if line and not line.startswith("#") and line not in terms:
            terms.append(line)
    return terms


def bundled_denylist() -> list[str]:
    return parse_denylist(resources.files("bootagent").joinpath("data/denylist.txt").read_text(encoding="utf-8"))


@dataclass(frozen=True)
class LintConfig:
    max_words: int = DEFAULT_MAX_WORDS
    wpm: int = DEFAULT_WPM
    denylist: tuple[str, ...] = field(default_factory=lambda: tuple(bundled_denylist()))

    @classmethod
    def from_file(cls, path: str | Path) -> "LintConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        kwargs: dict[str, Any] = {}
        if "max_words" in raw:
            kwargs["max_words"] = int(raw["max_words"])
        if "wpm" in raw:
            kwargs["wpm"] = int(raw["wpm"])
        if raw.get("denylist"):
            deny = Path(raw["denylist"])
            if not deny.is_absolute():
                deny = path.parent / deny
            kwargs["denylist"] = tuple(parse_denylist(deny.read_text(encoding="utf-8")))
        return cls(**kwargs)


@dataclass(frozen=True)
class Finding:
    rule: str
    severity: str
    location: str
    message: str

    def to_dict(self) -> dict[str, str]:
        return {"rule": self.rule, "severity": self.severity, "location": self.location, "message": self.message}


@dataclass(frozen=True)
class LintReport:
    findings: tuple[Finding, ...]
    word_count: int

    @property
    def passed(self) -> bool:
        return not any(f.severity == "error" for f in self.findings)

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warn"]

    def to_json(self) -> str:
        return json.dumps({
            "verdict": "pass" if self.passed else "fail",
            "word_count": self.word_count,
            "findings": [f.to_dict() for f in self.findings],
        }, indent=2, sort_keys=True)

    def render(self) -> str:
        lines = [f"{f.severity.upper():5} {f.rule} {f.location}: {f.message}" for f in self.findings]
        lines.append(f"words: {self.word_count}; verdict: {'pass' if self.passed else 'fail'}")
        return "\n".join(lines)


def _sentences(source: str) -> list[tuple[int, str]]:
    """Split into (line, sentence) pairs. Blank lines, headings and bullets start new blocks."""
    blocks: list[list[tuple[int, str]]] = [[]]
    for lineno, line in enumerate(_lines(source), start=1):
        if not line.strip() or BLOCK_START_RE.match(line) or SECTION_RE.match(line):
            blocks.append([])
        if line.strip():
            blocks[-1].append((lineno, line.strip()))
    out = []
    for block in blocks:
        if not block:
            continue
        text, starts = "", []
        for lineno, line in block:
            starts.append((len(text), lineno))
            text += line + " "
        pos = 0
        for piece in SENTENCE_END_RE.split(text):
            if piece.strip():
                idx = text.find(piece, pos)
                line_of = max(ln for off, ln in starts if off <= max(idx, 0))
                out.append((line_of, piece.strip()))
                pos = idx + len(piece)
    return out


def _term_pattern(term: str) -> re.Pattern:
    return re.compile(r"(?<![\w-])" + re.escape(term) + r"(?:s|es)?(?![\w-])", re.IGNORECASE)


def lint_spec(doc: SpecDocument, config: Optional[LintConfig] = None) -> LintReport:
    config = config or LintConfig()
    findings: list[Finding] = []
    words = doc.word_count
    if words > config.max_words:
        findings.append(Finding("R1", "error", "document",
                                f"{words} words exceeds the budget of {config.max_words}"))
    minutes = words / config.wpm
    if minutes > MAX_READING_MINUTES:
        findings.append(Finding("R2", "warn", "document",
                                f"reading time {minutes:.1f} min at {config.wpm} wpm exceeds "
                                f"{MAX_READING_MINUTES} min"))
    patterns = [(term, _term_pattern(term)) for term in config.denylist]
    for line, sentence in _sentences(doc.source):
        hits = [term for term, pat in patterns if pat.search(sentence)]
        if hits:
            excerpt = sentence if len(sentence) <= 80 else sentence[:77] + "..."
            findings.append(Finding("R3", "warn", f"line {line}",
                                    f"implementation terms {hits}: {excerpt!r}"))
    if not doc.sections:
        findings.append(Finding("R4", "error", "document", "no tagged sections ('## tag: heading')"))
    seen: set[str] = set()
    for s in doc.sections:
        if s.tag in seen:
            findings.append(Finding("R4", "error", f"line {s.line}", f"duplicate section tag {s.tag!r}"))
        seen.add(s.tag)
        if count_words(s.body) == 0:
            findings.append(Finding("R4", "error", f"line {s.line}", f"section {s.tag!r} is empty"))
    return LintReport(tuple(findings), words)
