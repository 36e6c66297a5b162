"""Work done inside a container restored from the compiled-target snapshot.

Each step reads its request from a directory mounted at ``/oss-crs/request``
and leaves ``result.json`` there; the container exit code only says whether
the step itself ran. Configuration arrives through the environment:

    SRC, OUT                   target layout of the build image
    OSS_CRS_SOURCE_ROOT        patchable source tree (diff paths are relative to it)
    OSS_CRS_BUILD_COMMAND      incremental rebuild command (default ``compile``)
    OSS_CRS_TEST_COMMAND       regression test command (optional)
    OSS_CRS_TEST_TIMEOUT       seconds, default 600
"""

from __future__ import annotations

import json
import os
import subprocess
import time
from pathlib import Path

from osscrs.patching import DiffParseError, PatchConflict, apply_patch

SANITIZER_MARKERS = ("ERROR: AddressSanitizer", "ERROR: libFuzzer")
LOG_TAIL = 8000
DEFAULT_TEST_TIMEOUT = 600.0
DEFAULT_POV_TIMEOUT = 60.0


def is_crash(returncode: int, output: str) -> bool:
    """Killed by a signal, exit status >= 128, or a sanitizer report in the output."""
    if returncode < 0 or returncode >= 128:
        return True
    return any(marker in output for marker in SANITIZER_MARKERS)


def _tail(text: str) -> str:
    return text[-LOG_TAIL:]


def _write(reqdir: Path, result: dict) -> dict:
    tmp = reqdir / ".result.json.tmp"
    tmp.write_text(json.dumps(result))
    os.replace(tmp, reqdir / "result.json")
    return result


def _shell(command: str, cwd: str | None, timeout: float | None) -> tuple[int, str]:
    proc = subprocess.run(["sh", "-c", command], cwd=cwd, stdout=subprocess.PIPE,
                          stderr=subprocess.STDOUT, timeout=timeout, stdin=subprocess.DEVNULL)
    return proc.returncode, proc.stdout.decode(errors="replace")


def patch_build(reqdir: Path) -> dict:
    started = time.monotonic()
    src_root = os.environ.get("OSS_CRS_SOURCE_ROOT") or os.environ.get("SRC", "/src")
    diff = (reqdir / "patch.diff").read_text()
    try:
        strip = apply_patch(diff, src_root)
    except (PatchConflict, DiffParseError) as exc:
        return _write(reqdir, {"status": "patch_conflict", "log": str(exc),
                               "elapsed": time.monotonic() - started})
    command = os.environ.get("OSS_CRS_BUILD_COMMAND") or "compile"
    code, output = _shell(command, os.environ.get("SRC"), None)
    log = f"patch applied with -p{strip}\n$ {command}\n{output}"
    status = "ok" if code == 0 else "build_failed"
    if code != 0:
        log += f"\nbuild command exited with {code}"
    return _write(reqdir, {"status": status, "log": _tail(log), "elapsed": time.monotonic() - started})


def run_pov(reqdir: Path, harness: str) -> dict:
    out_dir = Path(os.environ.get("OUT", "/out"))
    binary = out_dir / harness
    if "/" in harness or not binary.is_file():
        return _write(reqdir, {"error": f"harness {harness!r} not found in {out_dir}"})
    started = time.monotonic()
    try:
        proc = subprocess.run([str(binary), str(reqdir / "pov")], stdout=subprocess.PIPE,
                              stderr=subprocess.STDOUT, timeout=DEFAULT_POV_TIMEOUT,
                              stdin=subprocess.DEVNULL, cwd=str(out_dir))
        code, output = proc.returncode, proc.stdout.decode(errors="replace")
    except subprocess.TimeoutExpired:
        return _write(reqdir, {"status": "no_crash", "log": "harness timed out", "timed_out": True,
                               "elapsed": time.monotonic() - started})
    status = "crash_reproduced" if is_crash(code, output) else "no_crash"
    return _write(reqdir, {"status": status, "exit_code": code, "log": _tail(output),
                           "elapsed": time.monotonic() - started})


def run_test(reqdir: Path) -> dict:
    command = os.environ.get("OSS_CRS_TEST_COMMAND")
    if not command:
        return _write(reqdir, {"status": "tests_passed", "log": "no tests declared"})
    timeout = float(os.environ.get("OSS_CRS_TEST_TIMEOUT") or DEFAULT_TEST_TIMEOUT)
    started = time.monotonic()
    try:
        code, output = _shell(command, os.environ.get("SRC"), timeout)
    except subprocess.TimeoutExpired:
        return _write(reqdir, {"status": "tests_failed", "log": f"tests timed out after {timeout:g}s",
                               "elapsed": time.monotonic() - started})
    return _write(reqdir, {"status": "tests_passed" if code == 0 else "tests_failed",
                           "exit_code": code, "log": _tail(output), "elapsed": time.monotonic() - started})


def main(args: list[str]) -> int:
    if not args:
        print("usage: builder-step patch-build|run-pov|run-test REQDIR [HARNESS]")
        return 64
    op, rest = args[0], args[1:]
    reqdir = Path(rest[0]) if rest else Path("/oss-crs/request")
    if op == "patch-build":
        patch_build(reqdir)
    elif op == "run-pov" and len(rest) >= 2:
        run_pov(reqdir, rest[1])
    elif op == "run-test":
        run_test(reqdir)
    else:
        print(f"builder-step: bad arguments {args!r}")
        return 64
    return 0
