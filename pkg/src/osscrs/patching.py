"""Unified diff parsing and strict application.

Hunks must match their context exactly (no fuzz); a hunk may land at an
offset from its recorded line number, as with ``patch``. Application is
all-or-nothing: nothing is written unless every hunk of every file applies.
Standard library only (runs inside builder containers).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


class PatchError(Exception):
    pass


class DiffParseError(PatchError):
    pass


class PatchConflict(PatchError):
    pass


@dataclass
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: list[tuple[str, str]] = field(default_factory=list)  # (op, text incl. newline)

    @property
    def old_lines(self) -> list[str]:
        return [t for op, t in self.lines if op in " -"]

    @property
    def new_lines(self) -> list[str]:
        return [t for op, t in self.lines if op in " +"]


@dataclass
class FilePatch:
    old_path: str | None  # None for /dev/null
    new_path: str | None
    hunks: list[Hunk] = field(default_factory=list)

    def path(self, strip: int) -> str:
        raw = self.new_path if self.new_path is not None else self.old_path
        return strip_path(raw, strip)


def strip_path(path: str, strip: int) -> str:
    parts = [p for p in path.split("/") if p]
    if strip >= len(parts):
        raise PatchConflict(f"cannot strip {strip} component(s) from {path!r}")
    return "/".join(parts[strip:])


def _header_path(line: str) -> str | None:
    raw = line[4:].rstrip("\n")
    raw = raw.split("\t", 1)[0].strip()
    if raw == "/dev/null":
        return None
    return raw


def parse_unified_diff(text: str) -> list[FilePatch]:
    lines = text.splitlines(keepends=True)
    patches: list[FilePatch] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- ") and i + 1 < len(lines) and lines[i + 1].startswith("+++ "):
            fp = FilePatch(_header_path(line), _header_path(lines[i + 1]))
            if fp.old_path is None and fp.new_path is None:
                raise DiffParseError("both sides of a file header are /dev/null")
            i += 2
            while i < len(lines) and lines[i].startswith("@@"):
                m = _HUNK_RE.match(lines[i])
                if not m:
                    raise DiffParseError(f"malformed hunk header: {lines[i].rstrip()}")
                h = Hunk(int(m.group(1)), int(m.group(2) or 1), int(m.group(3)), int(m.group(4) or 1))
                i += 1
                old_seen = new_seen = 0
                while i < len(lines) and (old_seen < h.old_len or new_seen < h.new_len):
                    body = lines[i]
                    op = body[:1]
                    if body.startswith("\\"):
                        _drop_newline(h)
                        i += 1
                        continue
                    if op == "\n" or body == "":
                        op, body = " ", " \n"
                    if op not in " +-":
                        raise DiffParseError(f"unexpected line in hunk: {body.rstrip()!r}")
                    h.lines.append((op, body[1:]))
                    if op in " -":
                        old_seen += 1
                    if op in " +":
                        new_seen += 1
                    i += 1
                if old_seen != h.old_len or new_seen != h.new_len:
                    raise DiffParseError("hunk is shorter than its header claims")
                if i < len(lines) and lines[i].startswith("\\"):
                    _drop_newline(h)
                    i += 1
                fp.hunks.append(h)
            if not fp.hunks:
                raise DiffParseError(f"file header without hunks for {fp.new_path or fp.old_path}")
            patches.append(fp)
            continue
        i += 1
    if not patches:
        raise DiffParseError("no file patches found")
    return patches


def _drop_newline(h: Hunk) -> None:
    # "\ No newline at end of file" applies to the line just before it
    op, text = h.lines[-1]
    h.lines[-1] = (op, text[:-1] if text.endswith("\n") else text)


def _apply_hunks(original: list[str], hunks: list[Hunk], name: str) -> list[str]:
    out: list[str] = []
    cursor = 0
    for n, h in enumerate(hunks, 1):
        old = h.old_lines
        want = max(h.old_start - 1, 0) if h.old_len else h.old_start
        pos = _locate(original, old, want, cursor)
        if pos is None:
            raise PatchConflict(f"{name}: hunk #{n} does not match (context mismatch)")
        out.extend(original[cursor:pos])
        out.extend(h.new_lines)
        cursor = pos + len(old)
    out.extend(original[cursor:])
    return out


def _locate(lines: list[str], needle: list[str], want: int, floor: int) -> int | None:
    limit = len(lines) - len(needle)
    # nearest offset first, earlier position on ties
    for pos in sorted(range(floor, limit + 1), key=lambda p: (abs(p - want), p)):
        if lines[pos:pos + len(needle)] == needle:
            return pos
    return None


def plan_patch(patches: list[FilePatch], root: Path, strip: int) -> dict[Path, list[str] | None]:
    """Compute new file contents (None = delete) without touching disk."""
    root = root.resolve()
    result: dict[Path, list[str] | None] = {}
    for fp in patches:
        rel = fp.path(strip)
        target = (root / rel).resolve()
        if target != root and root not in target.parents:
            raise PatchConflict(f"{rel}: path escapes the source tree")
        if fp.old_path is None:
            if target.exists() or target in result:
                raise PatchConflict(f"{rel}: file to be created already exists")
            original: list[str] = []
        else:
            if target in result:
                original = result[target] or []
            elif target.is_file():
                original = target.read_text().splitlines(keepends=True)
            else:
                raise PatchConflict(f"{rel}: no such file")
        new = _apply_hunks(original, fp.hunks, rel)
        result[target] = None if fp.new_path is None else new
    return result


def apply_patch(diff_text: str, root: Path | str, strips: tuple[int, ...] = (1, 0)) -> int:
    """Apply ``diff_text`` under ``root``; returns the strip level that applied cleanly."""
    patches = parse_unified_diff(diff_text)
    root = Path(root)
    failures = []
    for strip in strips:
        try:
            changes = plan_patch(patches, root, strip)
        except PatchConflict as exc:
            failures.append(f"-p{strip}: {exc}")
            continue
        for path, content in changes.items():
            if content is None:
                path.unlink()
            else:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_name(f".{path.name}.patch-tmp")
                tmp.write_text("".join(content))
                if path.exists():
                    os.chmod(tmp, path.stat().st_mode)
                os.replace(tmp, path)
        return strip
    raise PatchConflict("; ".join(failures))
