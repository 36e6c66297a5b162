"""Runtime-neutral container types and the adapter interface."""

from __future__ import annotations

import abc
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from osscrs.config import CpuSet, HostInfo


class ContainerRuntimeError(RuntimeError):
    pass


class BuildError(ContainerRuntimeError):
    def __init__(self, message: str, log_path: Path | None = None, excerpt: str = ""):
        self.log_path = log_path
        self.excerpt = excerpt
        detail = f" (log: {log_path})" if log_path else ""
        if excerpt:
            detail += "\n" + excerpt
        super().__init__(message + detail)


class ImageNotFound(ContainerRuntimeError):
    pass


class NetworkError(ContainerRuntimeError):
    pass


class Unresolvable(NetworkError):
    """A name lookup from one network for a container on another."""


@dataclass(frozen=True)
class ImageBuildRequest:
    context_dir: Path
    containerfile: Path
    tag: str
    build_args: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if any(not k for k in self.build_args):
            raise ValueError("build_args keys must be nonempty")


@dataclass(frozen=True)
class Mount:
    host_path: Path
    container_path: str
    mode: str = "rw"

    def __post_init__(self):
        if self.mode not in ("ro", "rw"):
            raise ValueError(f"mount mode must be ro or rw, got {self.mode!r}")
        if not self.container_path.startswith("/"):
            raise ValueError(f"container path must be absolute: {self.container_path!r}")


@dataclass(frozen=True)
class ContainerSpec:
    image_tag: str
    cpuset: CpuSet
    memory_limit: int
    network: str
    env: Mapping[str, str] = field(default_factory=dict)
    mounts: tuple[Mount, ...] = ()
    entrypoint: tuple[str, ...] | None = None
    name: str | None = None
    ports: tuple[int, ...] = ()
    log_path: Path | None = None

    def __post_init__(self):
        if not self.network:
            raise ValueError("network must be nonempty")
        paths = [m.container_path.rstrip("/") for m in self.mounts]
        if len(paths) != len(set(paths)):
            raise ValueError("mount container paths must be distinct")


class ContainerHandle(abc.ABC):
    """A launched container. ``wait`` and ``stop`` are idempotent and thread-safe."""

    def __init__(self, id: str, spec: ContainerSpec, log_sink: Path):
        self.id = id
        self.spec = spec
        self.log_sink = log_sink
        self.state = "created"
        self.exit_code: int | None = None
        self._lock = threading.RLock()

    @property
    def label(self) -> str:
        if self.state == "exited":
            return f"exited({self.exit_code})"
        return self.state

    @property
    def done(self) -> bool:
        return self.state in ("exited", "killed")

    def _transition(self, new: str, code: int | None = None) -> None:
        allowed = {"created": {"running"}, "running": {"exited", "killed"}}
        with self._lock:
            if self.done:
                return
            if new not in allowed.get(self.state, set()):
                raise ContainerRuntimeError(f"illegal container state change {self.state} -> {new}")
            self.state = new
            self.exit_code = code

    @abc.abstractmethod
    def wait(self, timeout: float | None = None) -> str:
        """Block until the container finishes or ``timeout`` elapses; returns the state label."""

    @abc.abstractmethod
    def stop(self, grace: float = 10.0) -> str:
        """TERM, then KILL after ``grace`` seconds."""

    def logs(self) -> str:
        try:
            return self.log_sink.read_text(errors="replace")
        except FileNotFoundError:
            return ""

    @abc.abstractmethod
    def effective_limits(self) -> dict:
        """The cpuset (canonical string) and memory limit actually in force."""


class Runtime(abc.ABC):
    kind: str = "abstract"

    def __init__(self):
        self.events: list[tuple[str, str]] = []
        self._events_lock = threading.Lock()

    def record(self, kind: str, detail: str) -> None:
        with self._events_lock:
            self.events.append((kind, detail))

    @abc.abstractmethod
    def build_image(self, req: ImageBuildRequest) -> str: ...

    @abc.abstractmethod
    def image_exists(self, tag: str) -> bool: ...

    @abc.abstractmethod
    def create_network(self, name: str) -> str: ...

    @abc.abstractmethod
    def remove_network(self, name: str) -> None: ...

    @abc.abstractmethod
    def run_container(self, spec: ContainerSpec) -> ContainerHandle: ...

    @abc.abstractmethod
    def snapshot_container_image(self, handle: ContainerHandle, tag: str) -> str: ...

    @abc.abstractmethod
    def host_info(self) -> HostInfo: ...

    @abc.abstractmethod
    def service_host(self) -> str:
        """Address at which containers reach services running on the host."""

    @abc.abstractmethod
    def resolve(self, from_network: str, name: str, port: int) -> tuple[str, int]:
        """Where a container on ``from_network`` reaches ``name:port``."""

    def close(self) -> None:
        pass
