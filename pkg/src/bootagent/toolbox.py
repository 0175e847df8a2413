"""The agent's four tools, confined to one working directory.

``run_shell`` only pins the child's initial working directory; a command can
still ``cd`` elsewhere. Path-taking tools are fully confined.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .chat_protocol import ToolCall, ToolSpec

DEFAULT_SHELL_TIMEOUT = 60.0
DEFAULT_OUTPUT_CAP = 65536
TRUNCATION_NOTICE = "\n[output truncated]"

# Never handed to child shells.
SECRET_ENV_VARS = ("AGENT_API_KEY", "OPENAI_API_KEY")


class EscapeRejected(Exception):
    def __init__(self, path: str):
        super().__init__(f"path escapes the working directory: {path}")
        self.path = path


@dataclass(frozen=True)
class ToolResult:
    tool_call_id: str
    output: str
    is_error: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"tool_call_id": self.tool_call_id, "output": self.output, "is_error": self.is_error}


class Sandbox:
    def __init__(self, root: str | os.PathLike, shell_timeout: float = DEFAULT_SHELL_TIMEOUT,
                 output_cap: int = DEFAULT_OUTPUT_CAP):
        path = Path(root)
        if not path.is_dir():
            raise NotADirectoryError(f"working directory does not exist: {root}")
        if output_cap <= 0:
            raise ValueError("output_cap must be positive")
        self.root = Path(os.path.realpath(path))
        self.shell_timeout = shell_timeout
        self.output_cap = output_cap


def tool_catalog() -> list[ToolSpec]:
    def obj(props: dict[str, Any], required: list[str]) -> dict[str, Any]:
        return {"type": "object", "properties": props, "required": required}

    text = {"type": "string"}
    return [
        ToolSpec("read_file", "Read a text file relative to the working directory.",
                 obj({"path": text}, ["path"])),
        ToolSpec("write_file", "Create or overwrite a file relative to the working directory; "
                 "parent directories are created.",
                 obj({"path": text, "content": text}, ["path", "content"])),
        ToolSpec("list_files", "List a directory (default: the working directory). "
                 "Directories end with '/'.",
                 obj({"path": text}, [])),
        ToolSpec("run_shell", "Run a shell command in the working directory and report "
                 "exit status, stdout and stderr.",
                 obj({"command": text, "timeout_s": {"type": "number"}}, ["command"])),
    ]


TOOL_NAMES = tuple(spec.name for spec in tool_catalog())


def resolve_path(sb: Sandbox, relative: str) -> Path:
    """Map a model-supplied path to an absolute path inside ``sb.root``.

    Backslashes count as separators and drive-letter or rooted paths are
    treated as escape attempts, so the same corpus is rejected on every host.
    """
    if not isinstance(relative, str) or not relative:
        raise ValueError("path must be a non-empty string")
    if "\x00" in relative:
        raise EscapeRejected(relative)
    norm = relative.replace("\\", "/")
    if norm.startswith("/") or (len(norm) >= 2 and norm[1] == ":"):
        raise EscapeRejected(relative)
    candidate = os.path.realpath(os.path.join(sb.root, os.path.normpath(norm)))
    root = str(sb.root)
    if candidate != root and not candidate.startswith(root + os.sep):
        raise EscapeRejected(relative)
    return Path(candidate)


def _cap(sb: Sandbox, text: str) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= sb.output_cap:
        return text
    return raw[: sb.output_cap].decode("utf-8", errors="ignore") + TRUNCATION_NOTICE


def _read_file(sb: Sandbox, args: dict[str, Any]) -> str:
    path = resolve_path(sb, args["path"])
    return path.read_bytes().decode("utf-8", errors="replace") or "(empty file)"


def _write_file(sb: Sandbox, args: dict[str, Any]) -> str:
    path = resolve_path(sb, args["path"])
    if path == sb.root:
        raise IsADirectoryError(args["path"])
    data = args["content"].encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    # Recheck: mkdir may have walked through a symlink planted between calls.
    resolve_path(sb, args["path"])
    path.write_bytes(data)
    return f"ok: wrote {len(data)} bytes"


def _list_files(sb: Sandbox, args: dict[str, Any]) -> str:
    path = resolve_path(sb, args.get("path") or ".")
    entries = []
    for child in path.iterdir():
        entries.append(child.name + ("/" if child.is_dir() else ""))
    entries.sort(key=lambda name: name.encode("utf-8", errors="surrogateescape"))
    return "\n".join(entries) if entries else "(empty directory)"


def _child_env() -> dict[str, str]:
    return {k: v for k, v in os.environ.items() if k not in SECRET_ENV_VARS}


def _run_shell(sb: Sandbox, args: dict[str, Any]) -> str:
    timeout = sb.shell_timeout
    requested = args.get("timeout_s")
    if isinstance(requested, (int, float)) and not isinstance(requested, bool) and requested > 0:
        timeout = min(float(requested), timeout)
    proc = subprocess.Popen(
        args["command"], shell=True, cwd=sb.root, env=_child_env(),
        stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        start_new_session=True,
    )
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        try:
            proc.communicate(timeout=2)
        except subprocess.TimeoutExpired:
            pass  # a grandchild left the group and still holds the pipes
        raise TimeoutError(f"command timed out after {timeout:g}s") from None
    stdout = out.decode("utf-8", errors="replace")
    stderr = err.decode("utf-8", errors="replace")
    return f"exit: {proc.returncode}\nstdout:\n{stdout}\nstderr:\n{stderr}"


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


_TOOLS = {
    "read_file": (_read_file, ("path",)),
    "write_file": (_write_file, ("path", "content")),
    "list_files": (_list_files, ()),
    "run_shell": (_run_shell, ("command",)),
}


def execute_tool(sb: Sandbox, call: ToolCall) -> ToolResult:
    """Run one tool call. Never raises: every failure becomes an ``error:`` result."""

    def fail(message: str) -> ToolResult:
        return ToolResult(call.id, _cap(sb, f"error: {message}"), True)

    entry = _TOOLS.get(call.name)
    if entry is None:
        return fail(f"unknown tool {call.name!r}; available: {', '.join(TOOL_NAMES)}")
    handler, required = entry
    try:
        args = json.loads(call.arguments or "{}")
    except (ValueError, TypeError) as exc:
        return fail(f"arguments are not valid JSON: {exc}")
    if not isinstance(args, dict):
        return fail("arguments must be a JSON object")
    for name in required:
        if not isinstance(args.get(name), str):
            return fail(f"missing or non-string argument {name!r}")
    if "path" in args and not isinstance(args["path"], str):
        return fail("argument 'path' must be a string")
    try:
        output = handler(sb, args)
    except EscapeRejected as exc:
        return fail(str(exc))
    except FileNotFoundError:
        return fail(f"no such file or directory: {args.get('path', '')}")
    except IsADirectoryError:
        return fail(f"is a directory: {args.get('path', '')}")
    except NotADirectoryError:
        return fail(f"not a directory: {args.get('path', '')}")
    except TimeoutError as exc:
        return fail(str(exc))
    except Exception as exc:  # noqa: BLE001 - observations, not crashes
        return fail(f"{type(exc).__name__}: {exc}")
    return ToolResult(call.id, _cap(sb, output), False)
