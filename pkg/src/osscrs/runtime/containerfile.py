"""Parsing for the Dockerfile subset the mock runtime can execute.

Supported: FROM (single stage), ARG, ENV, WORKDIR, COPY/ADD (local files
only), RUN, CMD, ENTRYPOINT, plus comments and line continuations. Other
instructions are accepted and ignored (LABEL, EXPOSE, USER, ...).
"""

from __future__ import annotations

import json
import re
import shlex
from dataclasses import dataclass

_VAR_RE = re.compile(r"\$(?:\{([A-Za-z_][A-Za-z0-9_]*)(?::?-([^}]*))?\}|([A-Za-z_][A-Za-z0-9_]*))")
IGNORED = {"LABEL", "EXPOSE", "USER", "VOLUME", "SHELL", "HEALTHCHECK", "STOPSIGNAL", "ONBUILD", "MAINTAINER"}


class ContainerfileError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    op: str
    args: str
    line: int

    def json_or_shell(self) -> list[str]:
        text = self.args.strip()
        if text.startswith("["):
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                raise ContainerfileError(f"line {self.line}: malformed JSON array") from None
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ContainerfileError(f"line {self.line}: expected a JSON array of strings")
            return value
        return ["/bin/sh", "-c", text]


def parse(text: str) -> list[Instruction]:
    out = []
    buf = ""
    start = 0
    for n, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not buf and (not stripped or stripped.startswith("#")):
            continue
        if buf and stripped.startswith("#"):
            continue
        if not buf:
            start = n
        if stripped.endswith("\\"):
            buf += stripped[:-1].rstrip() + " "
            continue
        buf += stripped
        op, _, args = buf.partition(" ")
        out.append(Instruction(op.upper(), args.strip(), start))
        buf = ""
    if buf:
        op, _, args = buf.partition(" ")
        out.append(Instruction(op.upper(), args.strip(), start))
    froms = [i for i in out if i.op == "FROM"]
    if len(froms) != 1:
        raise ContainerfileError(f"expected exactly one FROM, found {len(froms)}")
    return out


def expand(text: str, scope: dict[str, str], line: int) -> str:
    """Expand ``$VAR``/``${VAR}``/``${VAR:-default}``; unknown names are an error."""

    def sub(m: re.Match) -> str:
        name = m.group(1) or m.group(3)
        if name in scope:
            value = scope[name]
            if value == "" and m.group(2) is not None:
                return m.group(2)
            return value
        if m.group(2) is not None:
            return m.group(2)
        raise ContainerfileError(f"line {line}: ${name} is not a declared build argument or variable")

    return _VAR_RE.sub(sub, text)


def parse_kv(args: str, line: int) -> list[tuple[str, str]]:
    """``K=V K2="v 2"`` or legacy ``K V``."""
    tokens = shlex.split(args)
    if not tokens:
        raise ContainerfileError(f"line {line}: missing key")
    if "=" not in tokens[0]:
        return [(tokens[0], " ".join(tokens[1:]))]
    pairs = []
    for tok in tokens:
        if "=" not in tok:
            raise ContainerfileError(f"line {line}: expected KEY=VALUE, got {tok!r}")
        k, _, v = tok.partition("=")
        pairs.append((k, v))
    return pairs


def copy_args(args: str, line: int) -> tuple[list[str], str]:
    text = args.strip()
    tokens = json.loads(text) if text.startswith("[") else shlex.split(text)
    tokens = [t for t in tokens if not t.startswith("--")]
    if len(tokens) < 2:
        raise ContainerfileError(f"line {line}: COPY needs a source and a destination")
    return tokens[:-1], tokens[-1]
