"""Host side of the builder sidecar: one per bug-fixing CRS.

Every request starts a fresh container from the compiled-target snapshot
(or from a previously patched image) with the owning CRS's cpuset and
memory limit, so rebuild cost is charged to that CRS. Requests are served
strictly one at a time in arrival order.
"""

from __future__ import annotations

import itertools
import json
import logging
import shutil
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path

from osscrs.config import CpuSet
from osscrs.exchange import content_hash
from osscrs.runtime.base import ContainerHandle, ContainerRuntimeError, ContainerSpec, Mount, Runtime

log = logging.getLogger(__name__)

REQUEST_MOUNT = "/oss-crs/request"
BASE_REF = "base"


class BuilderError(Exception):
    """A request the sidecar cannot serve (unknown build, missing harness, infrastructure)."""


class UnknownBuild(BuilderError):
    pass


@dataclass(frozen=True)
class Snapshot:
    image_tag: str
    build_command: str = "compile"
    source_root: str = "/src"
    test_command: str | None = None
    test_timeout: float = 600.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class BuildResult:
    status: str  # ok | patch_conflict | build_failed
    log: str = ""
    elapsed: float = 0.0
    patched_image_ref: str | None = None
    diff_hash: str = ""

    def to_json(self) -> dict:
        return {"status": self.status, "log": self.log, "elapsed": round(self.elapsed, 3),
                "build": self.patched_image_ref, "diff_hash": self.diff_hash}


@dataclass
class PovResult:
    status: str  # crash_reproduced | no_crash
    log: str = ""
    build: str = BASE_REF

    def to_json(self) -> dict:
        return {"status": self.status, "log": self.log, "build": self.build}


@dataclass
class TestResult:
    __test__ = False  # not a pytest test class

    status: str  # tests_passed | tests_failed
    log: str = ""
    build: str = BASE_REF

    def to_json(self) -> dict:
        return {"status": self.status, "log": self.log, "build": self.build}


class FifoLock:
    """A mutex granted in arrival order."""

    def __init__(self):
        self._cond = threading.Condition()
        self._tickets = itertools.count()
        self._serving = 0

    def __enter__(self):
        with self._cond:
            ticket = next(self._tickets)
            while ticket != self._serving:
                self._cond.wait()

    def __exit__(self, *exc):
        with self._cond:
            self._serving += 1
            self._cond.notify_all()


def capture_snapshot(runtime: Runtime, compiled: ContainerHandle, tag: str, *, build_command: str = "compile",
                     source_root: str = "/src", test_command: str | None = None,
                     test_timeout: float = 600.0) -> Snapshot:
    """Freeze the filesystem of a finished target compile as the builder's restore point."""
    if not compiled.done or compiled.exit_code != 0:
        raise BuilderError(f"cannot snapshot target compile in state {compiled.label}")
    runtime.snapshot_container_image(compiled, tag)
    return Snapshot(tag, build_command, source_root, test_command, test_timeout)


@dataclass
class _Allocation:
    cpuset: CpuSet
    memory_limit: int
    network: str = "none"


class BuilderService:
    def __init__(self, runtime: Runtime, snapshot: Snapshot, crs_name: str, cpuset: CpuSet,
                 memory_limit: int, work_dir: Path | str, extra_mounts: tuple[Mount, ...] = (),
                 step_timeout: float | None = None):
        self.runtime = runtime
        self.snapshot = snapshot
        self.crs_name = crs_name
        self.alloc = _Allocation(cpuset, memory_limit)
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.extra_mounts = tuple(extra_mounts)
        self.step_timeout = step_timeout or snapshot.test_timeout + 120
        self._lock = FifoLock()
        self._builds: dict[str, str] = {BASE_REF: snapshot.image_tag}
        self._diffs: dict[str, str] = {}
        self._counter = itertools.count(1)
        self.history: list[dict] = []
        self._hist_lock = threading.Lock()
        self.specs: list[ContainerSpec] = []

    # ---- helpers
    def _env(self) -> dict[str, str]:
        env = {
            "OSS_CRS_NAME": self.crs_name,
            "OSS_CRS_SOURCE_ROOT": self.snapshot.source_root,
            "OSS_CRS_BUILD_COMMAND": self.snapshot.build_command,
            "OSS_CRS_TEST_TIMEOUT": str(self.snapshot.test_timeout),
        }
        if self.snapshot.test_command:
            env["OSS_CRS_TEST_COMMAND"] = self.snapshot.test_command
        return env

    def _run_step(self, image: str, args: list[str], reqdir: Path):
        spec = ContainerSpec(
            image_tag=image,
            cpuset=self.alloc.cpuset,
            memory_limit=self.alloc.memory_limit,
            network=self.alloc.network,
            env=self._env(),
            mounts=(Mount(reqdir, REQUEST_MOUNT, "rw"),) + self.extra_mounts,
            entrypoint=("libcrs", "builder-step", *args),
            name=f"{self.crs_name}-builder-{reqdir.name}",
            log_path=reqdir / "container.log",
        )
        self.specs.append(spec)
        handle = self.runtime.run_container(spec)
        state = handle.wait(self.step_timeout)
        if not handle.done:
            handle.stop()
            raise BuilderError(f"builder step {args[0]} timed out after {self.step_timeout:g}s")
        result_path = reqdir / "result.json"
        if handle.exit_code != 0 or not result_path.is_file():
            raise BuilderError(f"builder step {args[0]} failed ({state}): {handle.logs()[-2000:]}")
        result = json.loads(result_path.read_text())
        if "error" in result:
            raise BuilderError(result["error"])
        return handle, result

    def _new_reqdir(self, kind: str) -> Path:
        d = self.work_dir / f"{kind}-{uuid.uuid4().hex[:10]}"
        d.mkdir(parents=True)
        return d

    def _image_for(self, build: str | None) -> tuple[str, str]:
        ref = build or BASE_REF
        if ref not in self._builds:
            raise UnknownBuild(f"unknown build {ref!r}")
        return ref, self._builds[ref]

    def _remember(self, entry: dict) -> None:
        with self._hist_lock:
            self.history.append({**entry, "time": time.time()})

    # ---- operations
    def apply_patch_build(self, diff_text: str) -> BuildResult:
        with self._lock:
            started = time.monotonic()
            reqdir = self._new_reqdir("build")
            (reqdir / "patch.diff").write_text(diff_text)
            digest = content_hash(diff_text.encode())
            try:
                handle, res = self._run_step(self.snapshot.image_tag, ["patch-build", REQUEST_MOUNT], reqdir)
                result = BuildResult(res["status"], res.get("log", ""), time.monotonic() - started, diff_hash=digest)
                if result.status == "ok":
                    ref = f"patch-{next(self._counter)}"
                    tag = f"{self.snapshot.image_tag}-{self.crs_name}-{ref}"
                    self.runtime.snapshot_container_image(handle, tag)
                    self._builds[ref] = tag
                    self._diffs[ref] = digest
                    result.patched_image_ref = ref
            finally:
                shutil.rmtree(reqdir, ignore_errors=True)
            self._remember({"op": "patch-build", "status": result.status, "build": result.patched_image_ref,
                            "diff_hash": digest})
            return result

    def run_pov(self, build: str | None, pov: bytes, harness: str) -> PovResult:
        with self._lock:
            ref, image = self._image_for(build)
            reqdir = self._new_reqdir("pov")
            (reqdir / "pov").write_bytes(pov)
            try:
                _, res = self._run_step(image, ["run-pov", REQUEST_MOUNT, harness], reqdir)
            finally:
                shutil.rmtree(reqdir, ignore_errors=True)
            result = PovResult(res["status"], res.get("log", ""), ref)
            self._remember({"op": "run-pov", "status": result.status, "build": ref,
                            "pov_hash": content_hash(pov), "harness": harness})
            return result

    def run_test(self, build: str | None) -> TestResult:
        with self._lock:
            ref, image = self._image_for(build)
            reqdir = self._new_reqdir("test")
            try:
                _, res = self._run_step(image, ["run-test", REQUEST_MOUNT], reqdir)
            finally:
                shutil.rmtree(reqdir, ignore_errors=True)
            result = TestResult(res["status"], res.get("log", ""), ref)
            self._remember({"op": "run-test", "status": result.status, "build": ref})
            return result

    def validated_patches(self) -> list[dict]:
        """Builds that applied, stopped a PoV from crashing, and passed the tests."""
        with self._hist_lock:
            history = list(self.history)
        out = []
        for ref, digest in self._diffs.items():
            povs = [h for h in history if h["op"] == "run-pov" and h["build"] == ref]
            tests = [h for h in history if h["op"] == "run-test" and h["build"] == ref]
            if povs and all(p["status"] == "no_crash" for p in povs) and \
                    any(t["status"] == "tests_passed" for t in tests):
                out.append({"crs": self.crs_name, "build": ref, "diff_hash": digest,
                            "povs": sorted({p["pov_hash"] for p in povs})})
        return out


__all__ = [
    "BASE_REF", "BuildResult", "BuilderError", "BuilderService", "ContainerRuntimeError", "capture_snapshot",
    "FifoLock", "PovResult", "Snapshot", "TestResult", "UnknownBuild",
]
