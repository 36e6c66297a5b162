"""The campaign state machine: prepare, build-target, run.

A campaign lives in one output directory. ``state.json`` there carries the
phase and everything later phases need (image tags, the compiled-target
snapshot, published build outputs), so each phase can run in its own
process. Phases only move forward:

    new -> prepared -> built -> running -> finished
"""

from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import shutil
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

from osscrs import libcrs
from osscrs.builder.server import BuilderServer
from osscrs.builder.service import BuilderService, Snapshot, capture_snapshot
from osscrs.config import (
    CpuSet, CrsPlan, InitialInputs, ValidatedPlan, format_cpuset,
)
from osscrs.exchange import ArtifactType, ExchangeStore, Registration, SyncStats, run_sidecar
from osscrs.llmproxy import LlmProxy, ProxyCore, issue_keys
from osscrs.patching import DiffParseError, parse_unified_diff
from osscrs.runtime import BuildError, ContainerHandle, ContainerSpec, ImageBuildRequest, Mount, Runtime
from osscrs.runtime.base import ContainerRuntimeError, NetworkError

log = logging.getLogger(__name__)

PHASES = ("new", "prepared", "built", "running", "finished")

TABLE_VARS = (
    "OSS_CRS_TARGET", "OSS_CRS_TARGET_HARNESS", "OSS_CRS_NAME", "OSS_CRS_CPUSET",
    "OSS_CRS_MEMORY_LIMIT", "OSS_CRS_LLM_API_URL", "OSS_CRS_LLM_API_KEY",
)
PLUMBING_VARS = (
    "OSS_CRS_CONTROL_DIR", "OSS_CRS_FETCH_DIR", "OSS_CRS_SHARED_DIR", "OSS_CRS_BUILD_OUTPUT_DIR",
    "OSS_CRS_EXCHANGE_DIR", "OSS_CRS_BUILDER_URL",
)
STOP_GRACE = 10.0
LIBCRS_IN_CONTAINER = "/usr/local/bin/libcrs"


class LifecycleError(RuntimeError):
    pass


class PhaseError(LifecycleError):
    """An operation invoked in the wrong phase; nothing was changed."""


class CampaignBusy(LifecycleError):
    pass


class PhaseFailure(LifecycleError):
    """A phase step failed; ``crs`` names the CRS at fault (None for the platform)."""

    def __init__(self, message: str, crs: str | None = None, log_path: Path | None = None, excerpt: str = ""):
        super().__init__(message + (f"\n{excerpt}" if excerpt else ""))
        self.crs = crs
        self.log_path = log_path
        self.excerpt = excerpt


class InfrastructureError(LifecycleError):
    """A shared service (exchange sidecar, LLM proxy, builder) died mid-run."""


class InputError(LifecycleError):
    pass


# --------------------------------------------------------------------------
# Environment contract
# --------------------------------------------------------------------------


def inject_env(plan: ValidatedPlan, crs_name: str, llm_url: str = "",
               keys: Mapping[str, object] | None = None,
               builder_urls: Mapping[str, str] | None = None) -> dict[str, str]:
    """Variables every container of ``crs_name`` receives.

    ``keys`` maps CRS name to an :class:`~osscrs.llmproxy.ApiKey` or a raw token.
    """
    try:
        crs = plan.crs(crs_name)
    except KeyError:
        raise LifecycleError(f"unknown CRS {crs_name!r}") from None
    target = plan.compose.target
    llm_on = plan.compose.llm.mode != "disabled"
    key = (keys or {}).get(crs_name, "") if llm_on else ""
    env = {
        "OSS_CRS_TARGET": target.project,
        "OSS_CRS_TARGET_HARNESS": target.harness,
        "OSS_CRS_NAME": crs.name,
        "OSS_CRS_CPUSET": crs.deployment.cpuset.canonical,
        "OSS_CRS_MEMORY_LIMIT": crs.deployment.memory_text,
        "OSS_CRS_LLM_API_URL": llm_url if llm_on else "",
        "OSS_CRS_LLM_API_KEY": getattr(key, "token", key) or "",
        "OSS_CRS_CONTROL_DIR": libcrs.CONTROL_DIR,
        "OSS_CRS_FETCH_DIR": libcrs.FETCH_DIR,
        "OSS_CRS_SHARED_DIR": libcrs.SHARED_DIR,
        "OSS_CRS_BUILD_OUTPUT_DIR": libcrs.BUILD_OUTPUT_DIR,
        "OSS_CRS_EXCHANGE_DIR": libcrs.EXCHANGE_DIR,
    }
    if crs.needs_builder and builder_urls and crs_name in builder_urls:
        env["OSS_CRS_BUILDER_URL"] = builder_urls[crs_name]
    return env


def redact(env: Mapping[str, str]) -> dict[str, str]:
    return {k: ("<redacted>" if k == "OSS_CRS_LLM_API_KEY" and v else v) for k, v in env.items()}


# --------------------------------------------------------------------------
# Initial inputs
# --------------------------------------------------------------------------


def validate_sarif(data: bytes) -> dict:
    try:
        doc = json.loads(data)
    except ValueError as exc:
        raise InputError(f"SARIF report is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "version" not in doc:
        raise InputError("SARIF report lacks a top-level 'version'")
    if not isinstance(doc.get("runs"), list) or not doc["runs"]:
        raise InputError("SARIF report needs a nonempty 'runs' array")
    return doc


def validate_diff(text: str) -> None:
    try:
        if not parse_unified_diff(text):
            raise InputError("diff file contains no file changes")
    except DiffParseError as exc:
        raise InputError(f"diff file is not a unified diff: {exc}") from None


def check_initial_inputs(inputs: InitialInputs | None, base: Path) -> None:
    """Reject malformed inputs before anything is started."""
    if inputs is None:
        return
    if inputs.diff_file:
        validate_diff(_read(base, inputs.diff_file).decode(errors="replace"))
    if inputs.sarif_file:
        validate_sarif(_read(base, inputs.sarif_file))
    if inputs.seed_corpus_dir and not (base / inputs.seed_corpus_dir).is_dir():
        raise InputError(f"seed corpus {base / inputs.seed_corpus_dir} is not a directory")


def _read(base: Path, rel: str) -> bytes:
    try:
        return (base / rel).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {base / rel}: {exc.strerror}") from None


def seed_initial_inputs(inputs: InitialInputs | None, store: ExchangeStore,
                        base: Path | str = ".") -> dict[str, int]:
    """Ingest operator inputs; returns admitted counts per type plus ``skipped``."""
    base = Path(base)
    counts = {ArtifactType.SEED.value: 0, ArtifactType.DIFF.value: 0, ArtifactType.BUG_CANDIDATE.value: 0,
              "skipped": 0}
    if inputs is None:
        return counts
    check_initial_inputs(inputs, base)
    if inputs.seed_corpus_dir:
        for path in sorted((base / inputs.seed_corpus_dir).rglob("*")):
            if not path.is_file():
                continue
            try:
                data = path.read_bytes()
            except OSError as exc:
                log.warning("skipping unreadable corpus entry %s: %s", path, exc.strerror)
                counts["skipped"] += 1
                continue
            if store.ingest(ArtifactType.SEED, data, "operator", path.name).admitted:
                counts[ArtifactType.SEED.value] += 1
    for rel, type_ in ((inputs.diff_file, ArtifactType.DIFF), (inputs.sarif_file, ArtifactType.BUG_CANDIDATE)):
        if rel and store.ingest(type_, _read(base, rel), "operator", Path(rel).name).admitted:
            counts[type_.value] += 1
    return counts


# --------------------------------------------------------------------------
# Build outputs
# --------------------------------------------------------------------------


class BuildOutputStore:
    """``<root>/<crs>/<name>/`` trees with manifests in ``<root>/<crs>/.manifests``."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def crs_dir(self, crs: str) -> Path:
        return self.root / crs

    def reset(self, crs: str) -> None:
        d = self.crs_dir(crs)
        if d.exists():
            for p in d.rglob("*"):
                if p.is_dir() and not p.is_symlink():
                    p.chmod(0o755)
            shutil.rmtree(d)
        d.mkdir(parents=True)

    def entries(self) -> dict[tuple[str, str], dict]:
        out = {}
        if not self.root.is_dir():
            return out
        for crs_dir in sorted(self.root.iterdir()):
            mdir = crs_dir / libcrs.MANIFESTS
            if not mdir.is_dir():
                continue
            for m in sorted(mdir.glob("*.json")):
                out[(crs_dir.name, m.stem)] = json.loads(m.read_text())
        return out

    def path(self, crs: str, name: str) -> Path:
        return self.crs_dir(crs) / name

    def verify(self, crs: str, name: str) -> bool:
        manifest = self.entries().get((crs, name))
        return manifest is not None and libcrs.tree_manifest(self.path(crs, name))["files"] == manifest["files"]


# --------------------------------------------------------------------------
# Persistent state
# --------------------------------------------------------------------------


@dataclass
class CampaignState:
    phase: str = "new"
    runtime: str = "mock"
    wiring: dict = field(default_factory=dict)
    prepare_images: dict[str, list[str]] = field(default_factory=dict)
    target_base: str | None = None
    snapshot: dict | None = None
    build_images: dict[str, list[str]] = field(default_factory=dict)
    build_outputs: dict[str, dict] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: Path) -> "CampaignState":
        data = json.loads(path.read_text())
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def save(self, path: Path) -> None:
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, path)


@contextlib.contextmanager
def campaign_lock(out_dir: Path) -> Iterator[None]:
    """Reject a second CLI process working on the same output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CampaignBusy(f"another oss-crs process is using {out_dir}") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _tag(*parts: str, suffix: str) -> str:
    name = "-".join(p.lower().replace("_", "-") for p in parts if p)
    return f"{name}:{suffix}"


# --------------------------------------------------------------------------
# Campaign
# --------------------------------------------------------------------------


@dataclass
class _Container:
    crs: str
    name: str
    spec: ContainerSpec
    handle: ContainerHandle | None = None
    start_error: str | None = None

    @property
    def label(self) -> str:
        if self.handle is None:
            return f"failed-to-start({self.start_error})"
        return self.handle.label


class Campaign:
    def __init__(self, plan: ValidatedPlan, out_dir: Path | str, runtime: Runtime,
                 state: CampaignState | None = None):
        self.plan = plan
        self.out_dir = Path(out_dir).resolve()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.runtime = runtime
        self.state_path = self.out_dir / "state.json"
        if state is None:
            state = CampaignState.load(self.state_path) if self.state_path.is_file() else \
                CampaignState(runtime=getattr(runtime, "kind", "mock"), wiring=plan.wiring())
        self.state = state
        self.build_outputs = BuildOutputStore(self.out_dir / "build-outputs")
        self.exchange_dir = self.out_dir / "exchange"
        self.containers: list[_Container] = []
        self.started = threading.Event()
        self._terminate = threading.Event()
        self.on_sync: Callable[[SyncStats], None] | None = None

    # ---- bookkeeping
    @property
    def phase(self) -> str:
        return self.state.phase

    def _require(self, *allowed: str) -> None:
        if self.state.phase not in allowed:
            expected = " or ".join(repr(a) for a in allowed)
            raise PhaseError(f"phase is {self.state.phase!r}, expected {expected}")
        if self.state.wiring and self.state.wiring != self.plan.wiring():
            raise PhaseError("the compose file changed since this campaign was prepared; use a new output dir")

    def _advance(self, phase: str, **event) -> None:
        assert PHASES.index(phase) >= PHASES.index(self.state.phase)
        self.state.phase = phase
        self.state.history.append({"phase": phase, "time": time.time(), **event})
        self.state.save(self.state_path)

    def crs_dir(self, crs: str, kind: str) -> Path:
        return self.out_dir / "crs" / crs / kind

    def _build_args(self, crs: CrsPlan) -> dict[str, str]:
        args = {}
        if self.state.target_base:
            args["TARGET_BASE_IMAGE"] = self.state.target_base
        for step, tag in zip(crs.manifest.prepare_phase, self.state.prepare_images.get(crs.name, [])):
            args["PREP_IMAGE_" + step.name.upper().replace("-", "_")] = tag
        return args

    def _build(self, crs: str | None, what: str, root: Path, dockerfile: str, context: str,
               tag: str, args: Mapping[str, str]) -> str:
        ctx = (root / context).resolve()
        df = Path(dockerfile)
        df = df if df.is_absolute() else (root / df)
        try:
            return self.runtime.build_image(ImageBuildRequest(ctx, df, tag, dict(args)))
        except BuildError as exc:
            who = f"CRS {crs!r} " if crs else ""
            raise PhaseFailure(f"{who}{what}: {exc}", crs, exc.log_path, exc.excerpt) from None

    def _libcrs_mounts(self) -> tuple[Mount, ...]:
        """Engine containers get libcrs as a read-only zipapp; the mock puts a shim on PATH."""
        if getattr(self.runtime, "kind", "mock") == "mock":
            return ()
        app = self.out_dir / ".runtime" / "libcrs"
        if not app.is_file():
            libcrs.build_zipapp(app)
        return (Mount(app, LIBCRS_IN_CONTAINER, "ro"),)

    def _alloc(self, crs: CrsPlan) -> tuple[CpuSet, int]:
        return crs.deployment.cpuset, crs.deployment.memory_limit

    # ---- phase 1
    def prepare(self) -> dict[str, list[str]]:
        """Build every CRS's prepare-phase images; unchanged contexts are cache hits."""
        self._require("new", "prepared")
        images: dict[str, list[str]] = {}
        for crs in self.plan.crses:
            tags = []
            for i, step in enumerate(crs.manifest.prepare_phase):
                tag = _tag(crs.name, step.name, suffix="prep")
                self._build(crs.name, f"prepare_phase step {i} ({step.name})", crs.manifest.root,
                            step.dockerfile, step.context, tag, step.args)
                tags.append(tag)
            images[crs.name] = tags
        self.state.prepare_images = images
        self._advance("prepared", images=sum(len(t) for t in images.values()))
        return images

    # ---- phase 2
    def build_target(self) -> CampaignState:
        self._require("prepared")
        target = self.plan.compose.target
        target_dir = self.plan.compose.resolve(target.path)
        if not target_dir.is_dir():
            raise PhaseFailure(f"target source {target_dir} does not exist")
        base = _tag(target.project, "base", suffix="target")
        self._build(None, f"target base image for {target.project}", target_dir,
                    "Dockerfile", ".", base, {})
        self.state.target_base = base
        extra = self._libcrs_mounts()

        build_images: dict[str, list[str]] = {}
        outputs: dict[str, dict] = {}
        for crs in self.plan.crses:
            self.build_outputs.reset(crs.name)
            control = self.crs_dir(crs.name, "build-control")
            control.mkdir(parents=True, exist_ok=True)
            tags = []
            for i, step in enumerate(crs.manifest.target_build_phase):
                what = f"target_build_phase step {i} ({step.name})"
                tag = _tag(crs.name, step.name, suffix="build")
                self._build(crs.name, what, crs.manifest.root, step.dockerfile, step.context, tag,
                            self._build_args(crs))
                tags.append(tag)
                cpuset, memory = self._alloc(crs)
                env = inject_env(self.plan, crs.name)
                env.pop("OSS_CRS_EXCHANGE_DIR")
                log_path = self.out_dir / "logs" / f"build-{crs.name}-{step.name}.log"
                spec = ContainerSpec(
                    tag, cpuset, memory, "none", env,
                    (Mount(self.build_outputs.crs_dir(crs.name), libcrs.BUILD_OUTPUT_DIR, "rw"),
                     Mount(control, libcrs.CONTROL_DIR, "rw")) + extra,
                    name=f"{crs.name}-{step.name}-build", log_path=log_path,
                )
                handle = self._start(spec, crs.name, what)
                handle.wait()
                if handle.exit_code != 0:
                    raise PhaseFailure(f"CRS {crs.name!r} {what} ended {handle.label}; log: {log_path}",
                                       crs.name, log_path, _excerpt(handle))
                missing = [o for o in step.outputs if not self.build_outputs.path(crs.name, o).exists()]
                if missing:
                    raise PhaseFailure(f"CRS {crs.name!r} {what} did not publish declared outputs "
                                       f"{', '.join(missing)}", crs.name, log_path)
            build_images[crs.name] = tags
            outputs[crs.name] = {name: m for (c, name), m in self.build_outputs.entries().items()
                                 if c == crs.name}
        self.state.build_images = build_images
        self.state.build_outputs = outputs

        if self.plan.needs_snapshot:
            self.state.snapshot = self._compile_snapshot(base, extra).to_json()
        self._advance("built")
        return self.state

    def _compile_snapshot(self, base: str, extra: tuple[Mount, ...]) -> Snapshot:
        target = self.plan.compose.target
        cores = sorted({c for crs in self.plan.crses for c in crs.deployment.cpuset.cores})
        memory = sum(crs.deployment.memory_limit for crs in self.plan.crses)
        log_path = self.out_dir / "logs" / "target-compile.log"
        spec = ContainerSpec(base, CpuSet(tuple(cores), format_cpuset(cores)), memory, "none",
                             {"OSS_CRS_TARGET": target.project}, extra,
                             entrypoint=("sh", "-c", target.build_command),
                             name=f"{target.project}-compile", log_path=log_path)
        handle = self._start(spec, None, "target compile")
        handle.wait()
        if handle.exit_code != 0:
            raise PhaseFailure(f"target compile ended {handle.label}; log: {log_path}", None, log_path,
                               _excerpt(handle))
        return capture_snapshot(self.runtime, handle, _tag(target.project, "snapshot", suffix="target"),
                                build_command=target.build_command,
                                source_root=target.source_root_in_image,
                                test_command=target.test_command)

    def _start(self, spec: ContainerSpec, crs: str | None, what: str) -> ContainerHandle:
        try:
            return self.runtime.run_container(spec)
        except ContainerRuntimeError as exc:
            raise PhaseFailure(f"{'CRS ' + repr(crs) + ' ' if crs else ''}{what}: {exc}", crs) from None

    # ---- phase 3
    def terminate(self) -> None:
        """Ask a running campaign to stop; safe from signal handlers and other threads."""
        self._terminate.set()

    def handles(self, crs: str | None = None) -> list[ContainerHandle]:
        return [c.handle for c in self.containers if c.handle and (crs is None or c.crs == crs)]

    def run(self, timeout: float | None = None) -> dict:
        self._require("built")
        compose = self.plan.compose
        check_initial_inputs(compose.initial_inputs, compose.base_dir or Path("."))
        timeout = compose.run_timeout if timeout is None else timeout

        # images first: a build failure here leaves the campaign in 'built'
        run_images: dict[tuple[str, str], str] = {}
        for crs in self.plan.crses:
            for cname, cspec in crs.manifest.crs_run_phase.items():
                tag = _tag(crs.name, cname, suffix="run")
                self._build(crs.name, f"crs_run_phase container {cname!r}", crs.manifest.root,
                            cspec.dockerfile, cspec.context, tag, self._build_args(crs))
                run_images[(crs.name, cname)] = tag

        self._advance("running")
        started_at = time.time()
        services = _Services()
        failure: str | None = None
        ended_by = "all-exited"
        seeded: dict[str, int] = {}
        sync = {"stats": SyncStats()}
        try:
            store = ExchangeStore(self.exchange_dir)
            self._setup_dirs()
            self._create_networks()
            llm_url, keys = self._start_proxy(services)
            seeded = seed_initial_inputs(compose.initial_inputs, store, compose.base_dir or Path("."))
            services.sidecar_stop = threading.Event()

            def sidecar():
                sync["stats"] = run_sidecar(self.registrations, store, compose.poll_interval,
                                            services.sidecar_stop, self.on_sync)

            services.sidecar = threading.Thread(target=sidecar, name="exchange-sidecar", daemon=True)
            services.sidecar.start()
            builder_urls = self._start_builders(services)
            self._launch(run_images, llm_url, keys, builder_urls)
            self.started.set()
            ended_by, failure = self._supervise(services, timeout, started_at)
        except LifecycleError as exc:
            ended_by, failure = "infrastructure-failure", str(exc)
        finally:
            self._stop_containers()
            services.stop()
            for crs in self.plan.crses:
                with contextlib.suppress(Exception):
                    self.runtime.remove_network(crs.network)

        report = self._report(started_at, ended_by, failure, timeout, seeded, sync["stats"], services)
        (self.out_dir / "campaign-report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        self._advance("finished", ended_by=ended_by)
        if failure:
            raise InfrastructureError(failure)
        return report

    def _setup_dirs(self) -> None:
        self.exchange_dir.mkdir(parents=True, exist_ok=True)
        for crs in self.plan.crses:
            for kind in ("control", "fetch", "shared"):
                self.crs_dir(crs.name, kind).mkdir(parents=True, exist_ok=True)
            self.build_outputs.crs_dir(crs.name).mkdir(parents=True, exist_ok=True)

    def _create_networks(self) -> None:
        for crs in self.plan.crses:
            try:
                self.runtime.create_network(crs.network)
            except NetworkError as exc:
                if "exist" not in str(exc):
                    raise LifecycleError(f"cannot create network {crs.network}: {exc}") from None

    def _bind_host(self) -> str:
        return "127.0.0.1" if getattr(self.runtime, "kind", "mock") == "mock" else "0.0.0.0"

    def _start_proxy(self, services: "_Services") -> tuple[str, dict]:
        settings = self.plan.compose.llm
        if settings.mode == "disabled":
            return "", {}
        keys = issue_keys(self.plan, enforce=settings.mode == "internal")
        services.proxy = LlmProxy(ProxyCore(settings, keys))
        port = services.proxy.start(self._bind_host())
        if hasattr(self.runtime, "register_service"):
            self.runtime.register_service("llm-proxy", port)
        return f"http://{self.runtime.service_host()}:{port}/v1", keys

    def _start_builders(self, services: "_Services") -> dict[str, str]:
        urls = {}
        if not self.state.snapshot:
            return urls
        snapshot = Snapshot(**self.state.snapshot)
        for crs in self.plan.crses:
            if not crs.needs_builder:
                continue
            cpuset, memory = self._alloc(crs)
            service = BuilderService(self.runtime, snapshot, crs.name, cpuset, memory,
                                     self.out_dir / "builder" / crs.name, self._libcrs_mounts())
            server = BuilderServer(service)
            port = server.start(self._bind_host())
            services.builders[crs.name] = server
            urls[crs.name] = f"http://{self.runtime.service_host()}:{port}"
        return urls

    def mounts_for(self, crs: str, flags: frozenset[str] | None = None) -> tuple[Mount, ...]:
        flags = frozenset(("fetch", "shared", "build-output")) if flags is None else flags
        mounts = [Mount(self.crs_dir(crs, "control"), libcrs.CONTROL_DIR, "rw"),
                  Mount(self.exchange_dir, libcrs.EXCHANGE_DIR, "rw")]
        if "fetch" in flags:
            mounts.append(Mount(self.crs_dir(crs, "fetch"), libcrs.FETCH_DIR, "ro"))
        if "shared" in flags:
            mounts.append(Mount(self.crs_dir(crs, "shared"), libcrs.SHARED_DIR, "rw"))
        if "build-output" in flags:
            mounts.append(Mount(self.build_outputs.crs_dir(crs), libcrs.BUILD_OUTPUT_DIR, "ro"))
        return tuple(mounts)

    def _launch(self, run_images, llm_url, keys, builder_urls) -> None:
        transcript_dir = self.out_dir / "env"
        transcript_dir.mkdir(exist_ok=True)
        extra = self._libcrs_mounts()
        for crs in self.plan.crses:
            env = inject_env(self.plan, crs.name, llm_url, keys, builder_urls)
            cpuset, memory = self._alloc(crs)
            for cname, cspec in crs.manifest.crs_run_phase.items():
                spec = ContainerSpec(
                    run_images[(crs.name, cname)], cpuset, memory, crs.network, env,
                    self.mounts_for(crs.name, cspec.mounts) + extra,
                    entrypoint=cspec.entrypoint, name=f"{crs.name}-{cname}",
                    log_path=self.out_dir / "logs" / f"{crs.name}-{cname}.log",
                )
                (transcript_dir / f"{crs.name}.{cname}.json").write_text(
                    json.dumps(redact(env), indent=2, sort_keys=True))
                entry = _Container(crs.name, cname, spec)
                try:
                    entry.handle = self.runtime.run_container(spec)
                except ContainerRuntimeError as exc:
                    # a CRS that cannot start is that CRS's failure, not the campaign's
                    log.error("CRS %s container %s failed to start: %s", crs.name, cname, exc)
                    entry.start_error = str(exc)
                self.containers.append(entry)

    def _supervise(self, services: "_Services", timeout: float | None, started_at: float):
        poll = min(self.plan.compose.poll_interval, 0.5)
        deadline = started_at + timeout if timeout else None
        supervisors = []
        for c in self.containers:
            if c.handle is not None:
                t = threading.Thread(target=_supervise_one, args=(c,), name=f"sup-{c.spec.name}", daemon=True)
                t.start()
                supervisors.append(t)
        while True:
            if self._terminate.is_set():
                return "terminated", None
            dead = services.dead()
            if dead:
                return "infrastructure-failure", f"shared service {dead} stopped unexpectedly"
            if all(c.handle is None or c.handle.done for c in self.containers):
                return "all-exited", None
            now = time.time()
            if deadline is not None and now >= deadline:
                return "timeout", None
            wait = poll if deadline is None else max(0.0, min(poll, deadline - now))
            self._terminate.wait(wait)

    def _stop_containers(self) -> None:
        threads = [threading.Thread(target=c.handle.stop, args=(STOP_GRACE,), daemon=True)
                   for c in self.containers if c.handle is not None and not c.handle.done]
        for t in threads:
            t.start()
        for t in threads:
            t.join(STOP_GRACE + 5)

    # ---- registrations
    def registrations(self) -> list[Registration]:
        """Every CRS's fetch mount plus whatever its containers registered so far."""
        regs = []
        for crs in self.plan.crses:
            regs.append(Registration(crs.name, "fetch", self.crs_dir(crs.name, "fetch")))
            path = self.crs_dir(crs.name, "control") / libcrs.REGISTRATIONS
            if not path.is_file():
                continue
            for line in path.read_text().splitlines():
                try:
                    rec = json.loads(line)
                except ValueError:
                    continue
                if rec.get("kind") not in ("submit", "fetch"):
                    continue
                host_dir = self.translate(crs.name, rec)
                if host_dir is None:
                    continue
                type_ = ArtifactType.parse(rec["artifact_type"]) if rec.get("artifact_type") else None
                regs.append(Registration(crs.name, rec["kind"], host_dir, type_))
        return list(dict.fromkeys(regs))

    def translate(self, crs: str, record: Mapping) -> Path | None:
        """Map a registered in-container directory to the host, refusing anything outside the CRS's mounts."""
        mounts = self.mounts_for(crs)
        allowed = [Path(m.host_path).resolve() for m in mounts if m.container_path != libcrs.EXCHANGE_DIR]
        candidates = []
        if record.get("resolved"):
            candidates.append(Path(record["resolved"]))
        container_dir = str(record.get("dir", ""))
        for m in mounts:
            prefix = m.container_path.rstrip("/")
            if container_dir == prefix or container_dir.startswith(prefix + "/"):
                candidates.append(Path(m.host_path) / container_dir[len(prefix):].lstrip("/"))
        for cand in candidates:
            real = Path(os.path.realpath(cand))
            if any(real == a or a in real.parents for a in allowed):
                return real
        log.warning("ignoring registration of %s by %s: not inside its mounts", container_dir, crs)
        return None

    # ---- report
    def _report(self, started_at, ended_by, failure, timeout, seeded, sync, services) -> dict:
        store = ExchangeStore(self.exchange_dir)
        index = store.index()
        per_type = {t.value: store.count(t) for t in ArtifactType}
        usage = services.proxy.core.usage_report() if services.proxy else {}
        validated = [v for b in services.builders.values() for v in b.service.validated_patches()]
        crses = {}
        for crs in self.plan.crses:
            mine = [r for r in index if r.get("origin") == crs.name]
            crses[crs.name] = {
                "type": crs.manifest.crs_type,
                "cpuset": crs.deployment.cpuset.canonical,
                "memory": crs.deployment.memory_text,
                "network": crs.network,
                "containers": {c.name: c.label for c in self.containers if c.crs == crs.name},
                "artifacts": {t.value: sum(1 for r in mine if r.get("type") == t.value) for t in ArtifactType},
                "llm": usage.get(crs.name),
                "builder": services.builders[crs.name].service.history if crs.name in services.builders else None,
            }
        finished = time.time()
        return {
            "status": "aborted" if failure else "completed",
            "ended_by": ended_by,
            "failure": failure,
            "target": {"project": self.plan.compose.target.project, "harness": self.plan.compose.target.harness},
            "runtime": getattr(self.runtime, "kind", "unknown"),
            "timeout": timeout,
            "started_at": started_at,
            "finished_at": finished,
            "wall_seconds": round(finished - started_at, 3),
            "crses": crses,
            "exchange": per_type,
            "povs": [{"hash": r["hash"], "origin": r.get("origin")} for r in index if r.get("type") == "pov"],
            "patches": [{"hash": r["hash"], "origin": r.get("origin")} for r in index if r.get("type") == "patch"],
            "validated_patches": validated,
            "initial_inputs": seeded,
            "sync": asdict(sync),
        }


def _excerpt(handle: ContainerHandle, lines: int = 20) -> str:
    try:
        return "\n".join(handle.logs().splitlines()[-lines:])
    except OSError:
        return ""


def _supervise_one(c: _Container) -> None:
    state = c.handle.wait()
    log.info("container %s ended %s", c.spec.name, c.handle.label if state else state)


class _Services:
    def __init__(self):
        self.proxy: LlmProxy | None = None
        self.sidecar: threading.Thread | None = None
        self.sidecar_stop: threading.Event | None = None
        self.builders: dict[str, BuilderServer] = {}

    def dead(self) -> str | None:
        if self.sidecar is not None and not self.sidecar.is_alive():
            return "exchange-sidecar"
        if self.proxy is not None and not self.proxy.alive:
            return "llm-proxy"
        for name, b in self.builders.items():
            if not b.alive:
                return f"builder-{name}"
        return None

    def stop(self) -> None:
        if self.sidecar_stop is not None:
            self.sidecar_stop.set()
        if self.sidecar is not None:
            self.sidecar.join(30)
        for b in self.builders.values():
            b.stop()
        if self.proxy is not None:
            self.proxy.stop()


# --------------------------------------------------------------------------
# Phase functions
# --------------------------------------------------------------------------


def phase_prepare(campaign: Campaign) -> Campaign:
    campaign.prepare()
    return campaign


def phase_build_target(campaign: Campaign) -> Campaign:
    campaign.build_target()
    return campaign


def phase_run(campaign: Campaign, timeout: float | None = None) -> dict:
    return campaign.run(timeout)


def open_campaign(plan: ValidatedPlan, out_dir: Path | str, runtime_kind: str = "mock",
                  runtime: Runtime | None = None) -> Campaign:
    """Load (or start) the campaign in ``out_dir`` with a runtime of the recorded kind."""
    from osscrs.runtime import make_runtime

    out_dir = Path(out_dir).resolve()
    state_path = out_dir / "state.json"
    state = CampaignState.load(state_path) if state_path.is_file() else None
    if state is not None and state.runtime != runtime_kind:
        raise PhaseError(f"campaign in {out_dir} uses the {state.runtime} runtime, not {runtime_kind}")
    if runtime is None:
        runtime = make_runtime(runtime_kind, out_dir / ".runtime")
    if state is None:
        state = CampaignState(runtime=runtime_kind, wiring=plan.wiring())
    return Campaign(plan, out_dir, runtime, state)
