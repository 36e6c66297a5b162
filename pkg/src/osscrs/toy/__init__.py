"""Self-contained toy fixtures: a C target with a planted crash and small CRSs.

``materialize`` copies them into a scratch directory laid out the way an
operator would keep a campaign (compose file next to ``crs/`` and ``projects/``).
"""

from __future__ import annotations

import shutil
from pathlib import Path

TOY_ROOT = Path(__file__).resolve().parent
PATCHES = ("correct", "conflicting", "nonfixing", "regressing", "broken")


def materialize(dest: Path | str) -> Path:
    """Copy the toy campaign into ``dest``; returns the compose file path."""
    dest = Path(dest)
    shutil.copytree(TOY_ROOT, dest, dirs_exist_ok=True,
                    ignore=shutil.ignore_patterns("__pycache__", "__init__.py", "*.o", "out"))
    return dest / "crs-compose.yaml"


def clone_crs(root: Path | str, source: str, new_name: str) -> Path:
    """Copy ``crs/<source>`` to ``crs/<new_name>`` with the manifest renamed."""
    root = Path(root)
    dest = root / "crs" / new_name
    shutil.copytree(root / "crs" / source, dest, dirs_exist_ok=True)
    manifest = dest / "crs.yaml"
    lines = [f"name: {new_name}" if line.startswith("name:") else line
             for line in manifest.read_text().splitlines()]
    manifest.write_text("\n".join(lines) + "\n")
    return dest


def patch_text(name: str) -> str:
    return (TOY_ROOT / "patches" / f"{name}.diff").read_text()


def write_compose(root: Path | str, crses: list[tuple[str, str, str, str]], *, timeout: str | None = None,
                  poll_interval: float = 0.2, inputs: dict | None = None, name: str = "crs-compose.yaml") -> Path:
    """Write a compose file for the toy target with the given ``(name, crs, cpuset, memory)`` entries."""
    import yaml

    root = Path(root)
    doc = yaml.safe_load((TOY_ROOT / "crs-compose.yaml").read_text())
    doc["crses"] = [{"name": n, "crs": c, "cpuset": cpus, "memory": mem} for n, c, cpus, mem in crses]
    doc["poll_interval"] = poll_interval
    doc.pop("inputs", None)
    doc.pop("timeout", None)
    if timeout is not None:
        doc["timeout"] = timeout
    if inputs:
        doc["inputs"] = inputs
    path = root / name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path
