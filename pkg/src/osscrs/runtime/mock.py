"""In-process runtime for tests and desk-scale campaigns.

Images are directory trees under ``<root>/images``; a container is a copy
of its image tree (the sandbox) in which the entrypoint runs as a local
process group. Absolute container paths in the environment and argv are
rewritten to point inside the sandbox, and mounts become symlinks from the
sandbox to the host directory, so scripts that address their filesystem
through environment variables ($SRC, $OUT, OSS_CRS_*) behave the same as
under a real engine.

Cgroup limits are recorded, not enforced. Networks are a registry of
(network, name) -> loopback port; lookups across networks fail.
"""

from __future__ import annotations

import glob
import hashlib
import json
import logging
import os
import shlex
import shutil
import signal
import socket
import subprocess
import sys
import threading
import uuid
from pathlib import Path

from osscrs.config import HostInfo, parse_cpuset
from osscrs.runtime import containerfile as cf
from osscrs.runtime.base import (
    BuildError, ContainerHandle, ContainerRuntimeError, ContainerSpec,
    ImageBuildRequest, ImageNotFound, NetworkError, Runtime, Unresolvable,
)

log = logging.getLogger(__name__)

# first path components that keep pointing at the host when not present in the sandbox
HOST_PASSTHROUGH = {"usr", "bin", "sbin", "lib", "lib32", "lib64", "etc", "proc", "dev", "sys", "nix", "var", "opt"}

# environment of images pulled from outside (never built locally); mirrors the
# continuous-fuzzing base-builder convention
STUB_BASE_ENV = {"SRC": "/src", "OUT": "/out", "WORK": "/work"}

DEFAULT_HOST = HostInfo(frozenset(range(64)), 256 * 1024**3)


def _safe(tag: str) -> str:
    return tag.replace("/", "_").replace(":", "__")


def _tree_digest(root: Path, h) -> None:
    for path in sorted(root.rglob("*")):
        rel = path.relative_to(root).as_posix()
        if path.is_symlink():
            h.update(f"L {rel} {os.readlink(path)}\n".encode())
        elif path.is_file():
            h.update(f"F {rel} {path.stat().st_mode & 0o777:o}\n".encode())
            h.update(hashlib.sha256(path.read_bytes()).digest())
        elif path.is_dir():
            h.update(f"D {rel}\n".encode())


class Sandbox:
    """Path translation between a container view and the sandbox on disk."""

    def __init__(self, rootfs: Path):
        self.rootfs = rootfs

    def host_path(self, container_path: str) -> Path:
        return self.rootfs / container_path.lstrip("/")

    def rewrite(self, value: str) -> str:
        if not value.startswith("/") or value.startswith("//"):
            return value
        if value == "/":
            return str(self.rootfs)
        first = value.lstrip("/").split("/", 1)[0]
        if (self.rootfs / first).exists() or os.path.islink(self.rootfs / first) or first not in HOST_PASSTHROUGH:
            return str(self.rootfs) + value
        return value

    def environment(self, env: dict[str, str], extra_path: list[str]) -> dict[str, str]:
        out = {k: self.rewrite(v) for k, v in env.items() if k != "PATH"}
        paths = list(extra_path)
        for entry in env.get("PATH", "").split(":"):
            if entry and (self.rootfs / entry.lstrip("/")).is_dir():
                paths.append(str(self.rootfs / entry.lstrip("/")))
        for sub in ("usr/local/bin", "bin"):
            if (self.rootfs / sub).is_dir():
                paths.append(str(self.rootfs / sub))
        paths.append(os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin"))
        out["PATH"] = ":".join(paths)
        out.setdefault("HOME", str(self.rootfs / "root"))
        out.setdefault("LANG", "C.UTF-8")
        return out


class MockContainer(ContainerHandle):
    def __init__(self, id, spec, log_sink, sandbox: Sandbox, mount_points: list[Path], runtime: "MockRuntime"):
        super().__init__(id, spec, log_sink)
        self.sandbox = sandbox
        self.mount_points = mount_points
        self.proc: subprocess.Popen | None = None
        self.image_meta: dict = {}
        self._runtime = runtime
        self._stop_requested = False

    def start(self, argv: list[str], cwd: Path, env: dict[str, str]) -> None:
        with self._lock:
            self._log_fh = open(self.log_sink, "ab")
            self.proc = subprocess.Popen(
                argv, cwd=cwd, env=env, stdout=self._log_fh, stderr=subprocess.STDOUT,
                stdin=subprocess.DEVNULL, start_new_session=True,
            )
            self._transition("running")
        self._runtime.record("started", self.spec.name or self.id)

    @property
    def pid(self) -> int | None:
        return self.proc.pid if self.proc else None

    def _reap(self, code: int) -> None:
        with self._lock:
            if self.done:
                return
            if code < 0:
                code = 128 - code
            if self._stop_requested:
                self._transition("killed")
            else:
                self._transition("exited", code)
            self._log_fh.close()
        self._runtime.record("exited", f"{self.spec.name or self.id}:{self.label}")

    def wait(self, timeout: float | None = None) -> str:
        if self.proc is None:
            return self.label
        try:
            code = self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            return self.label
        self._reap(code)
        return self.label

    def stop(self, grace: float = 10.0) -> str:
        with self._lock:
            if self.done or self.proc is None:
                return self.label
            code = self.proc.poll()
            if code is None:
                self._stop_requested = True
                self._signal(signal.SIGTERM)
        if code is not None:
            self._reap(code)
            return self.label
        try:
            code = self.proc.wait(grace)
        except subprocess.TimeoutExpired:
            self._signal(signal.SIGKILL)
            code = self.proc.wait()
        self._reap(code)
        return self.label

    def kill_hard(self) -> None:
        """Simulate a crash: SIGKILL without going through ``stop``."""
        self._signal(signal.SIGKILL)

    def _signal(self, sig: int) -> None:
        try:
            os.killpg(self.proc.pid, sig)
        except (ProcessLookupError, PermissionError):
            pass

    def effective_limits(self) -> dict:
        return {"cpuset": self.spec.cpuset.canonical, "memory": self.spec.memory_limit}


class MockRuntime(Runtime):
    kind = "mock"

    def __init__(self, root: Path | str, host: HostInfo | None = None):
        super().__init__()
        self.root = Path(root).resolve()
        self.images_dir = self.root / "images"
        self.containers_dir = self.root / "containers"
        self.bin_dir = self.root / "bin"
        for d in (self.images_dir, self.containers_dir, self.bin_dir):
            d.mkdir(parents=True, exist_ok=True)
        self._write_shims()
        self._host = host or _host_from_env() or DEFAULT_HOST
        self._networks: set[str] = set()
        self._registry: dict[tuple[str, str], int] = {}
        self._services: dict[str, int] = {}
        self._lock = threading.RLock()
        self.containers: list[MockContainer] = []

    # ---- shims on every container's PATH
    def _write_shims(self) -> None:
        shims = {
            "libcrs": f"#!/bin/sh\nexec {shlex.quote(sys.executable)} -m osscrs.libcrs \"$@\"\n",
            # the base-builder image of the fuzzing ecosystem provides `compile`, which runs $SRC/build.sh
            "compile": "#!/bin/sh\nset -e\ncd \"$SRC\"\nexec bash -eu \"$SRC/build.sh\" \"$@\"\n",
            "python3": f"#!/bin/sh\nexec {shlex.quote(sys.executable)} \"$@\"\n",
        }
        for name, body in shims.items():
            p = self.bin_dir / name
            if not p.exists() or p.read_text() != body:
                p.write_text(body)
                p.chmod(0o755)

    # ---- images
    def _image_dir(self, tag: str) -> Path:
        return self.images_dir / _safe(tag)

    def image_exists(self, tag: str) -> bool:
        return (self._image_dir(tag) / "meta.json").is_file()

    def image_meta(self, tag: str) -> dict:
        path = self._image_dir(tag) / "meta.json"
        if not path.is_file():
            raise ImageNotFound(f"image {tag!r} not found")
        return json.loads(path.read_text())

    def image_rootfs(self, tag: str) -> Path:
        self.image_meta(tag)
        return self._image_dir(tag) / "rootfs"

    def _input_digest(self, req: ImageBuildRequest, text: str, base_digest: str) -> str:
        h = hashlib.sha256()
        h.update(text.encode())
        h.update(json.dumps(dict(sorted(req.build_args.items()))).encode())
        h.update(base_digest.encode())
        _tree_digest(Path(req.context_dir), h)
        return h.hexdigest()

    def build_image(self, req: ImageBuildRequest) -> str:
        context = Path(req.context_dir)
        if not context.is_dir():
            raise BuildError(f"build context {context} does not exist")
        dockerfile = Path(req.containerfile)
        if not dockerfile.is_absolute():
            dockerfile = context / dockerfile
        if not dockerfile.is_file():
            raise BuildError(f"containerfile {dockerfile} not found")
        log_path = self.root / "build-logs" / f"{_safe(req.tag)}.log"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        text = dockerfile.read_text()
        try:
            instructions = cf.parse(text)
            base_tag, scope = self._resolve_from(instructions, req)
        except cf.ContainerfileError as exc:
            log_path.write_text(str(exc) + "\n")
            raise BuildError(f"building {req.tag} failed: {exc}", log_path, str(exc)) from None
        base_digest = self.image_meta(base_tag)["digest"] if base_tag else "stub:" + str(scope.get("__from__"))
        digest = self._input_digest(req, text, base_digest)
        if self.image_exists(req.tag) and self.image_meta(req.tag).get("input_digest") == digest:
            self.record("cached", req.tag)
            return req.tag
        with self._lock:
            return self._build(req, instructions, base_tag, scope, digest, context, log_path)

    def _resolve_from(self, instructions, req) -> tuple[str | None, dict]:
        scope: dict[str, str] = {}
        for ins in instructions:
            if ins.op == "ARG":
                name, has_default, default = ins.args.partition("=")
                name = name.strip()
                if name in req.build_args:
                    scope[name] = req.build_args[name]
                elif has_default:
                    scope[name] = default.strip().strip('"')
            if ins.op == "FROM":
                ref = cf.expand(ins.args.split()[0], scope, ins.line)
                if not ref:
                    raise cf.ContainerfileError(f"line {ins.line}: FROM names an empty image")
                scope["__from__"] = ref
                if ref == "scratch" or not self.image_exists(ref):
                    return None, scope
                return ref, scope
        raise cf.ContainerfileError("missing FROM")

    def _build(self, req, instructions, base_tag, scope, digest, context, log_path) -> str:
        work = self.images_dir / f".build-{uuid.uuid4().hex}"
        rootfs = work / "rootfs"
        if base_tag:
            base = self.image_meta(base_tag)
            shutil.copytree(self.image_rootfs(base_tag), rootfs, symlinks=True)
            env = dict(base["env"])
            workdir = base.get("workdir", "/")
            entrypoint, cmd = base.get("entrypoint"), base.get("cmd")
        else:
            rootfs.mkdir(parents=True)
            env = {} if scope.get("__from__") == "scratch" else dict(STUB_BASE_ENV)
            for d in env.values():
                (rootfs / d.lstrip("/")).mkdir(parents=True, exist_ok=True)
            workdir, entrypoint, cmd = "/", None, None
            self.record("stub-base", str(scope.get("__from__")))
        sandbox = Sandbox(rootfs)
        args: dict[str, str] = {}
        seen_from = False
        logf = open(log_path, "w")
        try:
            for ins in instructions:
                if ins.op == "FROM":
                    seen_from = True
                    continue
                if not seen_from:
                    continue
                vars_ = {**args, **env}
                if ins.op == "ARG":
                    name, has_default, default = ins.args.partition("=")
                    name = name.strip()
                    if name in req.build_args:
                        args[name] = req.build_args[name]
                    elif has_default:
                        args[name] = cf.expand(default.strip().strip('"'), vars_, ins.line)
                    elif name in scope:
                        args[name] = scope[name]
                    else:
                        args[name] = ""
                elif ins.op == "ENV":
                    for k, v in cf.parse_kv(cf.expand(ins.args, vars_, ins.line), ins.line):
                        env[k] = v
                elif ins.op == "WORKDIR":
                    wd = cf.expand(ins.args, vars_, ins.line)
                    workdir = wd if wd.startswith("/") else str(Path(workdir) / wd)
                    sandbox.host_path(workdir).mkdir(parents=True, exist_ok=True)
                elif ins.op in ("COPY", "ADD"):
                    srcs, dest = cf.copy_args(cf.expand(ins.args, vars_, ins.line), ins.line)
                    self._copy(context, srcs, dest, workdir, sandbox, ins.line)
                elif ins.op == "RUN":
                    argv = ins.json_or_shell()
                    logf.write(f"--> RUN {ins.args}\n")
                    logf.flush()
                    run_env = sandbox.environment({**args, **env}, [str(self.bin_dir)])
                    cwd = sandbox.host_path(workdir)
                    cwd.mkdir(parents=True, exist_ok=True)
                    proc = subprocess.run(argv, cwd=cwd, env=run_env, stdout=logf, stderr=subprocess.STDOUT)
                    if proc.returncode != 0:
                        raise cf.ContainerfileError(f"line {ins.line}: RUN exited with {proc.returncode}")
                elif ins.op == "CMD":
                    cmd = ins.json_or_shell()
                elif ins.op == "ENTRYPOINT":
                    entrypoint = ins.json_or_shell()
                    cmd = None
                elif ins.op not in cf.IGNORED:
                    raise cf.ContainerfileError(f"line {ins.line}: unsupported instruction {ins.op}")
        except (cf.ContainerfileError, OSError) as exc:
            logf.write(f"ERROR: {exc}\n")
            logf.close()
            shutil.rmtree(work, ignore_errors=True)
            excerpt = "\n".join(log_path.read_text(errors="replace").splitlines()[-20:])
            self.record("build-failed", req.tag)
            raise BuildError(f"building {req.tag} failed: {exc}", log_path, excerpt) from None
        logf.close()
        meta = {
            "tag": req.tag, "env": env, "workdir": workdir, "entrypoint": entrypoint, "cmd": cmd,
            "input_digest": digest, "base": scope.get("__from__"),
        }
        self._install_image(req.tag, work, meta)
        self.record("built", req.tag)
        return req.tag

    def _install_image(self, tag: str, work: Path, meta: dict) -> None:
        h = hashlib.sha256(json.dumps({k: meta[k] for k in ("env", "workdir", "entrypoint", "cmd")},
                                      sort_keys=True).encode())
        _tree_digest(work / "rootfs", h)
        meta["digest"] = h.hexdigest()
        (work / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        final = self._image_dir(tag)
        old = None
        if final.exists():
            old = final.with_name(f".old-{uuid.uuid4().hex}")
            final.rename(old)
        work.rename(final)
        if old:
            shutil.rmtree(old, ignore_errors=True)

    def _copy(self, context: Path, srcs, dest, workdir, sandbox: Sandbox, line: int) -> None:
        dest_c = dest if dest.startswith("/") else str(Path(workdir) / dest)
        target = sandbox.host_path(dest_c)
        matches = []
        for s in srcs:
            found = sorted(glob.glob(str(context / s)))
            if not found:
                raise cf.ContainerfileError(f"line {line}: COPY source {s!r} not found in context")
            matches += [Path(f) for f in found]
        into_dir = dest.endswith("/") or len(matches) > 1 or (target.is_dir() and not target.is_symlink())
        for src in matches:
            if src.resolve() != context.resolve() and context.resolve() not in src.resolve().parents:
                raise cf.ContainerfileError(f"line {line}: COPY source {src} is outside the context")
            if src.is_dir():
                target.mkdir(parents=True, exist_ok=True)
                shutil.copytree(src, target, symlinks=True, dirs_exist_ok=True)
            else:
                out = target / src.name if into_dir else target
                out.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(src, out)

    # ---- networks
    def create_network(self, name: str) -> str:
        with self._lock:
            if name in self._networks:
                raise NetworkError(f"network {name!r} already exists")
            self._networks.add(name)
        self.record("network", name)
        return name

    def remove_network(self, name: str) -> None:
        with self._lock:
            self._networks.discard(name)
            for key in [k for k in self._registry if k[0] == name]:
                del self._registry[key]

    def bind_port(self, network: str, name: str, port: int) -> int:
        """Allocate the loopback port a container listens on for its ``port``."""
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            host_port = s.getsockname()[1]
        with self._lock:
            self._registry[(network, f"{name}:{port}")] = host_port
        return host_port

    def register_service(self, name: str, port: int) -> None:
        """A shared infrastructure service reachable from every network."""
        with self._lock:
            self._services[name] = port

    def resolve(self, from_network: str, name: str, port: int) -> tuple[str, int]:
        with self._lock:
            if name in self._services:
                return "127.0.0.1", self._services[name]
            key = (from_network, f"{name}:{port}")
            if from_network in self._networks and key in self._registry:
                return "127.0.0.1", self._registry[key]
        raise Unresolvable(f"{name} is not reachable from network {from_network!r}")

    def connect(self, from_network: str, name: str, port: int, timeout: float = 2.0) -> socket.socket:
        host, p = self.resolve(from_network, name, port)
        return socket.create_connection((host, p), timeout=timeout)

    def service_host(self) -> str:
        return "127.0.0.1"

    def host_info(self) -> HostInfo:
        return self._host

    # ---- containers
    def run_container(self, spec: ContainerSpec) -> MockContainer:
        meta = self.image_meta(spec.image_tag)
        if spec.network != "none" and spec.network not in self._networks:
            raise NetworkError(f"network {spec.network!r} does not exist")
        outside = set(spec.cpuset.cores) - set(self._host.available_cores)
        if outside:
            raise ContainerRuntimeError(f"cpuset {spec.cpuset} is not within host cores")
        cid = uuid.uuid4().hex[:12]
        cdir = self.containers_dir / cid
        rootfs = cdir / "rootfs"
        shutil.copytree(self.image_rootfs(spec.image_tag), rootfs, symlinks=True)
        sandbox = Sandbox(rootfs)
        mount_points = []
        for m in spec.mounts:
            point = sandbox.host_path(m.container_path)
            if point.is_symlink() or point.is_file():
                point.unlink()
            elif point.is_dir():
                shutil.rmtree(point)
            point.parent.mkdir(parents=True, exist_ok=True)
            if not Path(m.host_path).exists():
                Path(m.host_path).mkdir(parents=True)
            point.symlink_to(Path(m.host_path).resolve())
            mount_points.append(point)
        env = {**meta["env"], **spec.env}
        for p in spec.ports:
            env[f"OSS_CRS_BIND_PORT_{p}"] = str(self.bind_port(spec.network, spec.name or cid, p))
        env.setdefault("HOSTNAME", spec.name or cid)
        run_env = sandbox.environment(env, [str(self.bin_dir)])
        if spec.entrypoint:
            argv = list(spec.entrypoint)
        else:
            argv = list(meta.get("entrypoint") or []) + list(meta.get("cmd") or [])
        if not argv:
            raise ContainerRuntimeError(f"image {spec.image_tag} has no entrypoint or command")
        argv = [sandbox.rewrite(a) for a in argv]
        cwd = sandbox.host_path(meta.get("workdir", "/"))
        cwd.mkdir(parents=True, exist_ok=True)
        log_sink = spec.log_path or (cdir / "container.log")
        log_sink.parent.mkdir(parents=True, exist_ok=True)
        handle = MockContainer(cid, spec, log_sink, sandbox, mount_points, self)
        handle.image_meta = meta
        (cdir / "spec.json").write_text(json.dumps({
            "image": spec.image_tag, "name": spec.name, "network": spec.network,
            "cpuset": spec.cpuset.canonical, "memory": spec.memory_limit, "argv": argv,
            "mounts": [[str(m.host_path), m.container_path, m.mode] for m in spec.mounts],
        }, indent=2))
        try:
            handle.start(argv, cwd, run_env)
        except OSError as exc:
            raise ContainerRuntimeError(f"cannot start {argv[0]}: {exc}") from None
        # lets out-of-process tooling find (and, in fault tests, kill) the container
        (cdir / "pid").write_text(str(handle.pid))
        with self._lock:
            self.containers.append(handle)
        return handle

    def snapshot_container_image(self, handle: ContainerHandle, tag: str) -> str:
        if not isinstance(handle, MockContainer):
            raise ContainerRuntimeError("handle does not belong to the mock runtime")
        if handle.state != "exited" or handle.exit_code != 0:
            raise ContainerRuntimeError(f"cannot snapshot container in state {handle.label}; needs exited(0)")
        work = self.images_dir / f".snap-{uuid.uuid4().hex}"
        skip = set(handle.mount_points)

        def ignore(dirname, names):
            return [n for n in names if Path(dirname, n) in skip]

        shutil.copytree(handle.sandbox.rootfs, work / "rootfs", symlinks=True, ignore=ignore)
        meta = dict(handle.image_meta)
        meta.update(tag=tag, base=handle.spec.image_tag, input_digest=None)
        self._install_image(tag, work, meta)
        self.record("snapshot", tag)
        return tag

    def cleanup_containers(self) -> None:
        for h in list(self.containers):
            if h.done:
                shutil.rmtree(self.containers_dir / h.id, ignore_errors=True)

    def close(self) -> None:
        for h in list(self.containers):
            if not h.done:
                h.stop(grace=2)


def _host_from_env() -> HostInfo | None:
    """``OSS_CRS_MOCK_HOST="cores=0-15;memory=64G"`` overrides the virtual host."""
    raw = os.environ.get("OSS_CRS_MOCK_HOST")
    if not raw:
        return None
    from osscrs.config import parse_memory

    parts = dict(p.strip().split("=", 1) for p in raw.split(";") if "=" in p)
    return HostInfo(frozenset(parse_cpuset(parts["cores"]).cores), parse_memory(parts.get("memory", "256G")))
