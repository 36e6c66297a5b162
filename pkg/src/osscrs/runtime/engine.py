"""Adapter over a Docker-CLI-compatible container engine.

All containers are siblings under the host daemon; nothing runs nested.
``OSS_CRS_ENGINE`` names the binary (default ``docker``) and
``OSS_CRS_ENGINE_FLAGS`` is prepended to every invocation (e.g. ``--host``).
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import threading
from pathlib import Path

from osscrs.config import HostInfo
from osscrs.runtime.base import (
    BuildError, ContainerHandle, ContainerRuntimeError, ContainerSpec,
    ImageBuildRequest, ImageNotFound, NetworkError, Runtime, Unresolvable,
)

log = logging.getLogger(__name__)

HOST_GATEWAY_NAME = "host.docker.internal"
LABEL = "org.oss-crs.managed=true"


class EngineContainer(ContainerHandle):
    def __init__(self, id, spec, log_sink, runtime: "EngineRuntime"):
        super().__init__(id, spec, log_sink)
        self._rt = runtime
        self._stop_requested = False

    def _finish(self, code: int) -> None:
        with self._lock:
            if self.done:
                return
            self._save_logs()
            self._transition("killed" if self._stop_requested else "exited", code)
        self._rt.record("exited", f"{self.spec.name or self.id}:{self.label}")

    def _save_logs(self) -> None:
        proc = self._rt.engine("logs", self.id, check=False)
        self.log_sink.parent.mkdir(parents=True, exist_ok=True)
        self.log_sink.write_text(proc.stdout + proc.stderr)

    def wait(self, timeout: float | None = None) -> str:
        if self.done:
            return self.label
        try:
            proc = self._rt.engine("wait", self.id, timeout=timeout)
        except subprocess.TimeoutExpired:
            return self.label
        self._finish(int(proc.stdout.strip().splitlines()[-1]))
        return self.label

    def stop(self, grace: float = 10.0) -> str:
        with self._lock:
            if self.done:
                return self.label
            self._stop_requested = True
        self._rt.engine("stop", "-t", str(int(grace)), self.id, check=False)
        return self.wait()

    def effective_limits(self) -> dict:
        proc = self._rt.engine("inspect", "--format", "{{json .HostConfig}}", self.id)
        cfg = json.loads(proc.stdout)
        return {"cpuset": cfg.get("CpusetCpus", ""), "memory": int(cfg.get("Memory", 0))}


class EngineRuntime(Runtime):
    kind = "engine"

    def __init__(self, log_dir: Path | str, engine: str | None = None, flags: list[str] | None = None):
        super().__init__()
        self.binary = engine or os.environ.get("OSS_CRS_ENGINE", "docker")
        self.flags = flags if flags is not None else shlex.split(os.environ.get("OSS_CRS_ENGINE_FLAGS", ""))
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self._members: dict[str, set[str]] = {}
        self._lock = threading.Lock()

    def engine(self, *args: str, check: bool = True, timeout: float | None = None,
               stdout_path: Path | None = None) -> subprocess.CompletedProcess:
        argv = [self.binary, *self.flags, *args]
        log.debug("engine: %s", shlex.join(argv))
        try:
            if stdout_path is not None:
                with open(stdout_path, "w") as fh:
                    proc = subprocess.run(argv, stdout=fh, stderr=subprocess.STDOUT, text=True, timeout=timeout)
                proc.stdout = proc.stderr = ""
            else:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except FileNotFoundError:
            raise ContainerRuntimeError(f"container engine {self.binary!r} not found") from None
        if check and proc.returncode != 0:
            raise ContainerRuntimeError(f"{shlex.join(argv)} failed ({proc.returncode}): {proc.stderr.strip()}")
        return proc

    def build_image(self, req: ImageBuildRequest) -> str:
        context = Path(req.context_dir)
        if not context.is_dir():
            raise BuildError(f"build context {context} does not exist")
        dockerfile = Path(req.containerfile)
        if not dockerfile.is_absolute():
            dockerfile = context / dockerfile
        log_path = self.log_dir / f"build-{req.tag.replace('/', '_').replace(':', '__')}.log"
        args = ["build", "-f", str(dockerfile), "-t", req.tag, "--label", LABEL]
        for k, v in sorted(req.build_args.items()):
            args += ["--build-arg", f"{k}={v}"]
        proc = self.engine(*args, str(context), check=False, stdout_path=log_path)
        if proc.returncode != 0:
            excerpt = "\n".join(log_path.read_text(errors="replace").splitlines()[-20:])
            self.record("build-failed", req.tag)
            raise BuildError(f"building {req.tag} failed", log_path, excerpt)
        self.record("built", req.tag)
        return req.tag

    def image_exists(self, tag: str) -> bool:
        return self.engine("image", "inspect", tag, check=False).returncode == 0

    def create_network(self, name: str) -> str:
        proc = self.engine("network", "create", "--label", LABEL, name, check=False)
        if proc.returncode != 0:
            raise NetworkError(f"cannot create network {name!r}: {proc.stderr.strip()}")
        with self._lock:
            self._members[name] = set()
        self.record("network", name)
        return name

    def remove_network(self, name: str) -> None:
        self.engine("network", "rm", name, check=False)
        with self._lock:
            self._members.pop(name, None)

    def run_container(self, spec: ContainerSpec) -> EngineContainer:
        if not self.image_exists(spec.image_tag):
            raise ImageNotFound(f"image {spec.image_tag!r} not found")
        args = [
            "run", "-d", "--label", LABEL,
            "--cpuset-cpus", spec.cpuset.canonical,
            "--memory", str(spec.memory_limit),
            "--network", spec.network,
            "--add-host", f"{HOST_GATEWAY_NAME}:host-gateway",
        ]
        if spec.name:
            args += ["--name", spec.name]
        for k, v in sorted(spec.env.items()):
            args += ["-e", f"{k}={v}"]
        for m in spec.mounts:
            args += ["-v", f"{Path(m.host_path).resolve()}:{m.container_path}:{m.mode}"]
        tail: list[str] = []
        if spec.entrypoint:
            args += ["--entrypoint", spec.entrypoint[0]]
            tail = list(spec.entrypoint[1:])
        proc = self.engine(*args, spec.image_tag, *tail, check=False)
        if proc.returncode != 0:
            raise ContainerRuntimeError(f"cannot start container from {spec.image_tag}: {proc.stderr.strip()}")
        cid = proc.stdout.strip().splitlines()[-1]
        log_sink = spec.log_path or (self.log_dir / f"{spec.name or cid}.log")
        handle = EngineContainer(cid, spec, log_sink, self)
        handle._transition("running")
        with self._lock:
            self._members.setdefault(spec.network, set()).add(spec.name or cid)
        self.record("started", spec.name or cid)
        return handle

    def snapshot_container_image(self, handle: ContainerHandle, tag: str) -> str:
        if handle.state != "exited" or handle.exit_code != 0:
            raise ContainerRuntimeError(f"cannot snapshot container in state {handle.label}; needs exited(0)")
        self.engine("commit", handle.id, tag)
        self.record("snapshot", tag)
        return tag

    def host_info(self) -> HostInfo:
        proc = self.engine("info", "--format", "{{json .}}")
        info = json.loads(proc.stdout)
        return HostInfo(frozenset(range(int(info["NCPU"]))), int(info["MemTotal"]))

    def service_host(self) -> str:
        return HOST_GATEWAY_NAME

    def resolve(self, from_network: str, name: str, port: int) -> tuple[str, int]:
        with self._lock:
            if name in self._members.get(from_network, set()):
                return name, port
        raise Unresolvable(f"{name} is not reachable from network {from_network!r}")
