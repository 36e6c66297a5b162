"""Independent reference implementations used to check the package's answers.

None of these import the code under test's logic; they only share its
input formats.
"""

from __future__ import annotations

import random
from dataclasses import dataclass


@dataclass
class Roster:
    host_cores: int
    host_memory: int
    aliases: list[str]
    mode: str
    crses: list[dict]  # {"name", "cores": set[int], "memory": int, "required": list[str]}


def brute_force_ok(r: Roster) -> bool:
    """The four scheduling predicates, checked by exhaustive counting."""
    usage = {}
    for c in r.crses:
        for core in c["cores"]:
            usage[core] = usage.get(core, 0) + 1
    if any(n > 1 for n in usage.values()):
        return False
    if any(core >= r.host_cores or core < 0 for core in usage):
        return False
    total = 0
    for c in r.crses:
        total += c["memory"]
    if total > r.host_memory:
        return False
    for c in r.crses:
        for alias in c["required"]:
            if r.mode == "disabled" or (r.mode == "internal" and alias not in r.aliases):
                return False
    return True


def _cpuset_text(cores: set[int], rng: random.Random) -> str:
    # mix list and range syntax so the parser is exercised too
    ordered = sorted(cores)
    if rng.random() < 0.5:
        return ",".join(map(str, ordered))
    parts, i = [], 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1] == ordered[j] + 1:
            j += 1
        parts.append(f"{ordered[i]}-{ordered[j]}" if j > i else str(ordered[i]))
        i = j + 1
    return ",".join(parts)


def random_roster(rng: random.Random) -> tuple[Roster, str, list[str]]:
    """A roster plus the compose document and manifest documents describing it."""
    host_cores = rng.randint(2, 16)
    host_memory_g = rng.randint(4, 64)
    pool = ["gpt", "mistral", "gemini", "local"]
    aliases = rng.sample(pool, rng.randint(0, len(pool)))
    mode = rng.choice(["internal", "internal", "disabled", "external"])
    if mode == "internal" and not aliases:
        aliases = [pool[0]]
    crses = []
    for i in range(rng.randint(1, 5)):
        width = rng.randint(1, 4)
        start = rng.randint(0, host_cores + 1)
        cores = {start + k for k in range(width)}
        if rng.random() < 0.3:
            cores.add(rng.randint(0, host_cores + 2))
        memory_g = rng.randint(1, max(1, host_memory_g // 2))
        required = rng.sample(pool, rng.randint(0, 2)) if rng.random() < 0.5 else []
        crses.append({"name": f"crs{i}", "cores": cores, "memory": memory_g * 1024**3,
                      "memory_text": f"{memory_g}G", "required": required,
                      "cpuset": _cpuset_text(cores, rng)})
    roster = Roster(host_cores, host_memory_g * 1024**3, aliases, mode, crses)
    lines = ["target: {project: demo, path: t, harness: fuzz}", "crses:"]
    for c in crses:
        lines.append(f'  - {{name: {c["name"]}, crs: {c["name"]}, cpuset: "{c["cpuset"]}", '
                     f'memory: {c["memory_text"]}}}')
    if mode == "internal":
        lines.append("llm:\n  mode: internal\n  models:")
        lines += [f"    - {{alias: {a}, model: m-{a}, endpoint: 'http://up/v1'}}" for a in aliases]
    elif mode == "external":
        lines.append("llm: {mode: external, endpoint: 'http://ext/v1'}")
    else:
        lines.append("llm: {mode: disabled}")
    manifests = []
    for c in crses:
        req = "[" + ", ".join(c["required"]) + "]"
        manifests.append(f"name: {c['name']}\ntype: bug-finding\nrequired_llms: {req}\n"
                         "crs_run_phase:\n  main: {dockerfile: Dockerfile}\n")
    return roster, "\n".join(lines) + "\n", manifests


# ---- builder outcome matrix, derived by hand from the fixture's source

EXPECTED_MATRIX = {
    # patch: (apply, run-pov on the patched build, run-test on the patched build)
    "correct": ("ok", "no_crash", "tests_passed"),
    "conflicting": ("patch_conflict", None, None),
    "nonfixing": ("ok", "crash_reproduced", "tests_passed"),
    "regressing": ("ok", "no_crash", "tests_failed"),
}


def toy_field_count(data: bytes) -> int | None:
    """Reference semantics of the toy parser: None means the planted crash fires."""
    if b"CRASH" in data:
        return None
    return data.count(b",") + 1
