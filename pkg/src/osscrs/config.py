"""Campaign configuration: ``crs.yaml`` manifests, ``crs-compose.yaml`` and plans.

Parsing is strict. Unknown keys are errors, and every problem found in a
document is collected before raising so an operator sees the full list in
one pass.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

CRS_TYPES = ("bug-finding", "bug-fixing")
LANGUAGES = ("c", "cpp", "java")
LLM_MODES = ("internal", "external", "disabled")
MOUNT_FLAGS = ("build-output", "fetch", "shared")
MIN_MEMORY = 64 * 1024**2

_MEMORY_RE = re.compile(r"^\s*(\d+)\s*([KMGkmg]?)\s*$")
_DURATION_RE = re.compile(r"(\d+(?:\.\d+)?)([hms]?)")
_NAME_RE = re.compile(r"^[a-z0-9][a-z0-9_.-]*$")
_CENT = Decimal("0.01")


class ConfigError(ValueError):
    """A document or descriptor failed validation; ``errors`` lists every problem."""

    def __init__(self, errors: str | Iterable[str]):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class PlanError(ConfigError):
    """The campaign as a whole cannot be scheduled on the host."""


# --------------------------------------------------------------------------
# Resource descriptors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CpuSet:
    cores: tuple[int, ...]
    source_text: str = ""

    def __post_init__(self):
        if not self.cores:
            raise ConfigError("cpuset is empty")

    @property
    def canonical(self) -> str:
        return format_cpuset(self.cores)

    def __str__(self) -> str:
        return self.canonical

    def __and__(self, other: "CpuSet") -> set[int]:
        return set(self.cores) & set(other.cores)


def parse_cpuset(text: str) -> CpuSet:
    """Parse a cpuset descriptor such as ``"0,2,4-6"``."""
    text = str(text)
    if not text.strip():
        raise ConfigError("cpuset: empty descriptor")
    cores: set[int] = set()
    for token in text.split(","):
        token = token.strip()
        if not token:
            raise ConfigError(f"cpuset: empty token in {text!r}")
        lo_s, sep, hi_s = token.partition("-")
        if not lo_s.isdigit() or (sep and not hi_s.isdigit()):
            raise ConfigError(f"cpuset: non-numeric token {token!r}")
        lo = int(lo_s)
        hi = int(hi_s) if sep else lo
        if hi < lo:
            raise ConfigError(f"cpuset: reversed range {token!r}")
        cores.update(range(lo, hi + 1))
    return CpuSet(tuple(sorted(cores)), text)


def format_cpuset(cores: Iterable[int]) -> str:
    ordered = sorted(set(cores))
    parts = []
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1] == ordered[j] + 1:
            j += 1
        parts.append(str(ordered[i]) if i == j else f"{ordered[i]}-{ordered[j]}")
        i = j + 1
    return ",".join(parts)


def parse_memory(value: str | int) -> int:
    """Bytes for ``"16G"``-style values; K/M/G are powers of 1024, bare numbers are bytes."""
    if isinstance(value, bool):
        raise ConfigError(f"memory: unparseable value {value!r}")
    if isinstance(value, int):
        if value < 0:
            raise ConfigError(f"memory: negative value {value}")
        return value
    m = _MEMORY_RE.match(str(value))
    if not m:
        raise ConfigError(f"memory: unparseable value {value!r}")
    exp = {"": 0, "k": 1, "m": 2, "g": 3}[m.group(2).lower()]
    return int(m.group(1)) * 1024**exp


def parse_duration(value: str | int | float) -> float:
    """Seconds for ``60``, ``"60s"``, ``"1m30s"`` or ``"24h"``."""
    if isinstance(value, bool):
        raise ConfigError(f"duration: unparseable value {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    pos = 0
    total = 0.0
    for m in _DURATION_RE.finditer(text):
        if m.start() != pos:
            break
        total += float(m.group(1)) * {"": 1, "s": 1, "m": 60, "h": 3600}[m.group(2)]
        pos = m.end()
    if not text or pos != len(text):
        raise ConfigError(f"duration: unparseable value {value!r}")
    return total


def parse_dollars(value: Any, what: str = "llm_budget") -> Decimal:
    if isinstance(value, bool):
        raise ConfigError(f"{what}: not a number: {value!r}")
    try:
        amount = Decimal(str(value))
    except InvalidOperation:
        raise ConfigError(f"{what}: not a number: {value!r}") from None
    if not amount.is_finite():
        raise ConfigError(f"{what}: not a finite number: {value!r}")
    if amount < 0:
        raise ConfigError(f"{what}: negative amount {value}")
    if amount != amount.quantize(_CENT):
        raise ConfigError(f"{what}: more precise than a cent: {value}")
    return amount.quantize(_CENT)


def _parse_price(value: Any, what: str) -> Decimal:
    try:
        price = Decimal(str(value))
    except InvalidOperation:
        raise ConfigError(f"{what}: not a number: {value!r}") from None
    if not price.is_finite() or price < 0:
        raise ConfigError(f"{what}: must be a nonnegative number, got {value!r}")
    return price


# --------------------------------------------------------------------------
# crs.yaml
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageBuildStep:
    name: str
    dockerfile: str
    context: str = "."
    args: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class TargetBuildStep:
    """A builder container built ``FROM`` the target base image and run once."""

    name: str
    dockerfile: str
    context: str = "."
    outputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunContainerSpec:
    name: str
    dockerfile: str
    context: str = "."
    entrypoint: tuple[str, ...] | None = None
    mounts: frozenset[str] = frozenset(MOUNT_FLAGS)


@dataclass(frozen=True)
class CrsManifest:
    name: str
    crs_type: str
    languages: frozenset[str]
    required_llms: tuple[str, ...]
    prepare_phase: tuple[ImageBuildStep, ...]
    target_build_phase: tuple[TargetBuildStep, ...]
    crs_run_phase: Mapping[str, RunContainerSpec]
    root: Path | None = None

    @property
    def bug_fixing(self) -> bool:
        return self.crs_type == "bug-fixing"


def _load_yaml(document: str, what: str) -> dict:
    try:
        data = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{what}: malformed YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{what}: top level must be a mapping")
    return data


def _unknown(section: str, data: Mapping, allowed: Iterable[str], errors: list[str]):
    extra = sorted(set(data) - set(allowed))
    if extra:
        errors.append(f"{section}: unknown key(s) {', '.join(map(str, extra))}")


def _str_list(value: Any, what: str, errors: list[str]) -> list[str]:
    if value is None:
        return []
    if not isinstance(value, list):
        errors.append(f"{what}: expected a list")
        return []
    out = []
    for item in value:
        if not isinstance(item, str) or not item.strip():
            errors.append(f"{what}: entries must be nonempty strings, got {item!r}")
        else:
            out.append(item)
    return out


def _steps(raw: Any, section: str, errors: list[str], allowed: tuple[str, ...]) -> list[dict]:
    if raw is None:
        return []
    if not isinstance(raw, list):
        errors.append(f"{section}: expected a list of steps")
        return []
    steps = []
    seen = set()
    for i, step in enumerate(raw):
        where = f"{section}[{i}]"
        if not isinstance(step, dict):
            errors.append(f"{where}: expected a mapping")
            continue
        _unknown(where, step, allowed, errors)
        name = step.get("name")
        if not isinstance(name, str) or not name:
            errors.append(f"{where}: missing name")
            continue
        if name in seen:
            errors.append(f"{section}: duplicate step name {name!r}")
        seen.add(name)
        if not isinstance(step.get("dockerfile"), str):
            errors.append(f"{where}: missing dockerfile")
            continue
        steps.append(step)
    return steps


def parse_manifest(document: str, root: Path | str | None = None) -> CrsManifest:
    """Parse a ``crs.yaml`` document; ``root`` anchors relative dockerfile paths."""
    data = _load_yaml(document, "crs.yaml")
    errors: list[str] = []
    _unknown(
        "crs.yaml",
        data,
        ("name", "type", "languages", "required_llms", "prepare_phase",
         "target_build_phase", "crs_run_phase"),
        errors,
    )
    name = data.get("name")
    if not isinstance(name, str) or not _NAME_RE.match(name):
        errors.append(f"name: must be a nonempty lowercase identifier, got {name!r}")
    crs_type = data.get("type")
    if crs_type not in CRS_TYPES:
        errors.append(f"type: unknown crs_type {crs_type!r} (expected one of {', '.join(CRS_TYPES)})")
    languages = _str_list(data.get("languages"), "languages", errors)
    for lang in languages:
        if lang not in LANGUAGES:
            errors.append(f"languages: unknown language {lang!r}")
    required_llms = _str_list(data.get("required_llms"), "required_llms", errors)

    prepare = [
        ImageBuildStep(
            s["name"], s["dockerfile"], str(s.get("context", ".")),
            {str(k): str(v) for k, v in (s.get("args") or {}).items()},
        )
        for s in _steps(data.get("prepare_phase"), "prepare_phase", errors,
                        ("name", "dockerfile", "context", "args"))
    ]
    target_build = []
    for s in _steps(data.get("target_build_phase"), "target_build_phase", errors,
                    ("name", "dockerfile", "context", "outputs")):
        target_build.append(TargetBuildStep(
            s["name"], s["dockerfile"], str(s.get("context", ".")),
            tuple(_str_list(s.get("outputs"), f"target_build_phase.{s['name']}.outputs", errors)),
        ))

    run_raw = data.get("crs_run_phase")
    run: dict[str, RunContainerSpec] = {}
    if run_raw is None:
        errors.append("crs_run_phase: missing (crs_run_phase has >=1 entry)")
    elif isinstance(run_raw, list):
        # list form: [{name: fuzzer, dockerfile: ...}, ...]
        entries = []
        for i, item in enumerate(run_raw):
            if not isinstance(item, dict) or not isinstance(item.get("name"), str):
                errors.append(f"crs_run_phase[{i}]: expected a mapping with a name")
                continue
            entries.append((item["name"], {k: v for k, v in item.items() if k != "name"}))
        names = [n for n, _ in entries]
        for dup in sorted({n for n in names if names.count(n) > 1}):
            errors.append(f"crs_run_phase: duplicate container name {dup!r}")
        run_raw = dict(entries)
    elif not isinstance(run_raw, dict):
        errors.append("crs_run_phase: expected a mapping of container name to definition")
        run_raw = {}
    if isinstance(run_raw, dict):
        if not run_raw and data.get("crs_run_phase") is not None:
            errors.append("crs_run_phase: crs_run_phase has >=1 entry")
        for cname, spec in run_raw.items():
            where = f"crs_run_phase.{cname}"
            if not isinstance(spec, dict):
                errors.append(f"{where}: expected a mapping")
                continue
            _unknown(where, spec, ("dockerfile", "context", "entrypoint", "mounts"), errors)
            if not isinstance(spec.get("dockerfile"), str):
                errors.append(f"{where}: missing dockerfile")
                continue
            entry = spec.get("entrypoint")
            if isinstance(entry, str):
                entry = ["sh", "-c", entry]
            mounts = spec.get("mounts", list(MOUNT_FLAGS))
            mounts = _str_list(mounts, f"{where}.mounts", errors)
            for m in mounts:
                if m not in MOUNT_FLAGS:
                    errors.append(f"{where}.mounts: unknown mount {m!r}")
            run[str(cname)] = RunContainerSpec(
                str(cname), spec["dockerfile"], str(spec.get("context", ".")),
                tuple(str(a) for a in entry) if entry else None,
                frozenset(mounts),
            )
    if errors:
        raise ConfigError(errors)
    return CrsManifest(
        name=name,
        crs_type=crs_type,
        languages=frozenset(languages),
        required_llms=tuple(required_llms),
        prepare_phase=tuple(prepare),
        target_build_phase=tuple(target_build),
        crs_run_phase=run,
        root=Path(root) if root is not None else None,
    )


def load_manifest(path: Path | str) -> CrsManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "crs.yaml"
    return parse_manifest(path.read_text(), root=path.parent)


# --------------------------------------------------------------------------
# crs-compose.yaml
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetRef:
    project: str
    path: str
    harness: str
    language: str = "c"
    build_command: str = "compile"
    test_command: str | None = None
    source_root: str | None = None
    snapshot: bool = True

    @property
    def source_root_in_image(self) -> str:
        return self.source_root or f"/src/{self.project}"


@dataclass(frozen=True)
class CrsDeployment:
    name: str
    crs_ref: str
    cpuset: CpuSet
    memory_text: str
    memory_limit: int
    llm_budget: Decimal | None = None


@dataclass(frozen=True)
class ModelRoute:
    alias: str
    provider_model: str
    endpoint: str
    credential_ref: str | None = None
    price_in: Decimal = Decimal(0)
    price_out: Decimal = Decimal(0)


@dataclass(frozen=True)
class LlmSettings:
    mode: str = "disabled"
    model_routes: tuple[ModelRoute, ...] = ()
    external_endpoint: str | None = None
    external_key: str | None = None

    def route(self, alias: str) -> ModelRoute | None:
        for r in self.model_routes:
            if r.alias == alias:
                return r
        return None


@dataclass(frozen=True)
class InitialInputs:
    seed_corpus_dir: str | None = None
    diff_file: str | None = None
    sarif_file: str | None = None


@dataclass(frozen=True)
class ComposeConfig:
    target: TargetRef
    crs_entries: tuple[CrsDeployment, ...]
    llm: LlmSettings
    run_timeout: float | None = None
    out_dir: str = "out"
    initial_inputs: InitialInputs | None = None
    poll_interval: float = 0.5
    base_dir: Path | None = None

    def resolve(self, p: str) -> Path:
        path = Path(os.path.expandvars(os.path.expanduser(p)))
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path


def _parse_routes(raw: Any, errors: list[str]) -> list[ModelRoute]:
    routes = []
    if not isinstance(raw, list):
        errors.append("llm.models: expected a list")
        return routes
    for i, entry in enumerate(raw):
        where = f"llm.models[{i}]"
        if not isinstance(entry, dict):
            errors.append(f"{where}: expected a mapping")
            continue
        if "model_name" in entry:
            try:
                routes.append(_route_from_litellm(entry, where))
            except ConfigError as exc:
                errors.extend(exc.errors)
            continue
        _unknown(where, entry, ("alias", "model", "endpoint", "credential", "price_in", "price_out"), errors)
        alias, model, endpoint = entry.get("alias"), entry.get("model"), entry.get("endpoint")
        if not alias or not model or not endpoint:
            errors.append(f"{where}: alias, model and endpoint are required")
            continue
        try:
            routes.append(ModelRoute(
                str(alias), str(model), str(endpoint), entry.get("credential"),
                _parse_price(entry.get("price_in", 0), f"{where}.price_in"),
                _parse_price(entry.get("price_out", 0), f"{where}.price_out"),
            ))
        except ConfigError as exc:
            errors.extend(exc.errors)
    return routes


def _route_from_litellm(entry: Mapping, where: str) -> ModelRoute:
    params = entry.get("litellm_params") or {}
    info = entry.get("model_info") or {}
    if not isinstance(params, dict) or not params.get("model"):
        raise ConfigError(f"{where}: litellm_params.model is required")
    key = params.get("api_key")
    credential = None
    if isinstance(key, str) and key.startswith("os.environ/"):
        credential = key.split("/", 1)[1]
    elif key is not None:
        raise ConfigError(f"{where}: api_key must reference an env var as os.environ/NAME")

    def per_million(name: str) -> Decimal:
        raw = params.get(name, info.get(name, 0))
        return _parse_price(raw, f"{where}.{name}") * 1_000_000

    return ModelRoute(
        alias=str(entry["model_name"]),
        provider_model=str(params["model"]),
        endpoint=str(params.get("api_base", "")),
        credential_ref=credential,
        price_in=per_million("input_cost_per_token"),
        price_out=per_million("output_cost_per_token"),
    )


def parse_route_file(document: str) -> list[ModelRoute]:
    """Routes from a LiteLLM-style ``model_list`` file."""
    data = _load_yaml(document, "route file")
    errors: list[str] = []
    _unknown("route file", data, ("model_list", "litellm_settings", "general_settings"), errors)
    entries = data.get("model_list")
    if not isinstance(entries, list):
        errors.append("route file: model_list must be a list")
        entries = []
    routes = []
    for i, entry in enumerate(entries):
        try:
            if not isinstance(entry, dict) or "model_name" not in entry:
                raise ConfigError(f"model_list[{i}]: model_name is required")
            routes.append(_route_from_litellm(entry, f"model_list[{i}]"))
        except ConfigError as exc:
            errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return routes


def parse_compose(document: str, base_dir: Path | str | None = None) -> ComposeConfig:
    """Parse ``crs-compose.yaml``; relative paths are later resolved against ``base_dir``."""
    data = _load_yaml(document, "crs-compose.yaml")
    errors: list[str] = []
    _unknown("crs-compose.yaml", data,
             ("target", "crses", "llm", "timeout", "out_dir", "inputs", "poll_interval"), errors)
    base = Path(base_dir) if base_dir is not None else None

    t = data.get("target")
    target = None
    if not isinstance(t, dict):
        errors.append("target: required mapping")
    else:
        _unknown("target", t, ("project", "path", "harness", "language", "build_command",
                               "test_command", "source_root", "snapshot"), errors)
        missing = [k for k in ("project", "path", "harness") if not t.get(k)]
        if missing:
            errors.append(f"target: missing {', '.join(missing)}")
        lang = t.get("language", "c")
        if lang not in LANGUAGES:
            errors.append(f"target.language: unknown language {lang!r}")
        if not missing:
            target = TargetRef(
                project=str(t["project"]), path=str(t["path"]), harness=str(t["harness"]),
                language=lang, build_command=str(t.get("build_command", "compile")),
                test_command=t.get("test_command"), source_root=t.get("source_root"),
                snapshot=bool(t.get("snapshot", True)),
            )

    entries: list[CrsDeployment] = []
    raw_crses = data.get("crses")
    if not isinstance(raw_crses, list) or not raw_crses:
        errors.append("crses: at least one CRS entry is required")
        raw_crses = []
    names: list[str] = []
    for i, c in enumerate(raw_crses):
        where = f"crses[{i}]"
        if not isinstance(c, dict):
            errors.append(f"{where}: expected a mapping")
            continue
        _unknown(where, c, ("name", "crs", "cpuset", "memory", "llm_budget"), errors)
        name = c.get("name")
        if not isinstance(name, str) or not _NAME_RE.match(name):
            errors.append(f"{where}: name must be a nonempty lowercase identifier, got {name!r}")
            continue
        where = f"crses.{name}"
        names.append(name)
        entry_errors: list[str] = []
        cpuset = memory = budget = None
        try:
            cpuset = parse_cpuset(c.get("cpuset", ""))
        except ConfigError as exc:
            entry_errors += [f"{where}: {e}" for e in exc.errors]
        mem_text = c.get("memory")
        if mem_text is None:
            entry_errors.append(f"{where}: memory is required")
        else:
            try:
                memory = parse_memory(mem_text)
                if memory < MIN_MEMORY:
                    entry_errors.append(f"{where}: memory {mem_text} is below the 64M minimum")
            except ConfigError as exc:
                entry_errors += [f"{where}: {e}" for e in exc.errors]
        if c.get("llm_budget") is not None:
            try:
                budget = parse_dollars(c["llm_budget"])
            except ConfigError as exc:
                entry_errors += [f"{where}: {e}" for e in exc.errors]
        errors += entry_errors
        if not entry_errors:
            entries.append(CrsDeployment(name, str(c.get("crs", name)), cpuset, str(mem_text), memory, budget))
    for dup in sorted({n for n in names if names.count(n) > 1}):
        errors.append(f"crses: duplicate CRS name {dup!r}")

    llm = _parse_llm(data.get("llm"), base, errors)

    timeout = None
    if data.get("timeout") is not None:
        try:
            timeout = parse_duration(data["timeout"])
            if timeout <= 0:
                errors.append("timeout: must be > 0")
        except ConfigError as exc:
            errors.extend(exc.errors)

    inputs = None
    raw_inputs = data.get("inputs")
    if raw_inputs is not None:
        if not isinstance(raw_inputs, dict):
            errors.append("inputs: expected a mapping")
        else:
            _unknown("inputs", raw_inputs, ("corpus", "diff", "sarif"), errors)
            inputs = InitialInputs(raw_inputs.get("corpus"), raw_inputs.get("diff"), raw_inputs.get("sarif"))

    poll = data.get("poll_interval", 0.5)
    try:
        poll = parse_duration(poll)
        if poll <= 0:
            errors.append("poll_interval: must be > 0")
    except ConfigError as exc:
        errors.extend(exc.errors)

    if errors:
        raise ConfigError(errors)
    return ComposeConfig(
        target=target,
        crs_entries=tuple(entries),
        llm=llm,
        run_timeout=timeout,
        out_dir=str(data.get("out_dir", "out")),
        initial_inputs=inputs,
        poll_interval=poll,
        base_dir=base,
    )


def _parse_llm(raw: Any, base: Path | None, errors: list[str]) -> LlmSettings:
    if raw is None:
        return LlmSettings("disabled")
    if not isinstance(raw, dict):
        errors.append("llm: expected a mapping")
        return LlmSettings("disabled")
    _unknown("llm", raw, ("mode", "models", "models_file", "endpoint", "key", "key_env"), errors)
    mode = raw.get("mode", "internal")
    if mode not in LLM_MODES:
        errors.append(f"llm.mode: unknown mode {mode!r}")
        return LlmSettings("disabled")
    routes: list[ModelRoute] = []
    if raw.get("models") is not None:
        routes += _parse_routes(raw["models"], errors)
    if raw.get("models_file"):
        path = Path(raw["models_file"])
        if not path.is_absolute() and base is not None:
            path = base / path
        try:
            routes += parse_route_file(path.read_text())
        except OSError as exc:
            errors.append(f"llm.models_file: cannot read {path}: {exc.strerror}")
        except ConfigError as exc:
            errors += [f"llm.models_file: {e}" for e in exc.errors]
    aliases = [r.alias for r in routes]
    for dup in sorted({a for a in aliases if aliases.count(a) > 1}):
        errors.append(f"llm.models: duplicate alias {dup!r}")

    endpoint = raw.get("endpoint")
    key = raw.get("key")
    if raw.get("key_env"):
        key = os.environ.get(raw["key_env"], "")
    if mode == "internal" and not routes:
        errors.append("llm: internal mode requires at least one model route")
    if mode == "external" and not endpoint:
        errors.append("llm: external mode requires an endpoint")
    if mode == "disabled" and (routes or endpoint):
        errors.append("llm: disabled mode takes no models or endpoint")
    return LlmSettings(mode, tuple(routes), endpoint, key)


def load_compose(path: Path | str) -> ComposeConfig:
    path = Path(path)
    return parse_compose(path.read_text(), base_dir=path.resolve().parent)


# --------------------------------------------------------------------------
# Campaign validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HostInfo:
    available_cores: frozenset[int]
    total_memory: int

    def __post_init__(self):
        if not self.available_cores:
            raise ValueError("host reports no cores")

    @classmethod
    def detect(cls) -> "HostInfo":
        cores = frozenset(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") \
            else frozenset(range(os.cpu_count() or 1))
        memory = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
        return cls(cores, memory)


@dataclass(frozen=True)
class CrsPlan:
    name: str
    manifest: CrsManifest
    deployment: CrsDeployment
    network: str
    key_slot: bool

    @property
    def needs_builder(self) -> bool:
        return self.manifest.bug_fixing


@dataclass(frozen=True)
class ValidatedPlan:
    compose: ComposeConfig
    crses: tuple[CrsPlan, ...]

    def crs(self, name: str) -> CrsPlan:
        for c in self.crses:
            if c.name == name:
                return c
        raise KeyError(f"unknown CRS {name!r}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.crses]

    @property
    def needs_snapshot(self) -> bool:
        return any(c.needs_builder for c in self.crses)

    def wiring(self) -> dict:
        """The deterministic part of the plan, for reproducibility checks."""
        return {
            c.name: {
                "manifest": c.manifest.name,
                "network": c.network,
                "cpuset": c.deployment.cpuset.canonical,
                "memory": c.deployment.memory_limit,
                "key_slot": c.key_slot,
                "builder": c.needs_builder,
            }
            for c in self.crses
        }


def campaign_errors(compose: ComposeConfig, manifests: list[CrsManifest], host: HostInfo) -> list[str]:
    """Every reason the campaign cannot run; empty when it can."""
    errors: list[str] = []
    entries = compose.crs_entries
    if len(manifests) != len(entries):
        return [f"expected {len(entries)} manifests, got {len(manifests)}"]

    seen_manifest: dict[str, str] = {}
    for entry, man in zip(entries, manifests):
        if man.name in seen_manifest:
            errors.append(f"CRS manifest name {man.name!r} used by both "
                          f"{seen_manifest[man.name]!r} and {entry.name!r}")
        seen_manifest[man.name] = entry.name

    for i, a in enumerate(entries):
        for b in entries[i + 1:]:
            shared = a.cpuset & b.cpuset
            if shared:
                errors.append(f"cpuset overlap on cores {{{','.join(map(str, sorted(shared)))}}} "
                              f"between {a.name!r} and {b.name!r}")
    for e in entries:
        outside = set(e.cpuset.cores) - set(host.available_cores)
        if outside:
            errors.append(f"{e.name}: cpuset cores {format_cpuset(outside)} are not available on the host")
    total = sum(e.memory_limit for e in entries)
    if total > host.total_memory:
        errors.append(f"total memory {total} bytes exceeds host memory {host.total_memory} bytes")

    mode = compose.llm.mode
    aliases = {r.alias for r in compose.llm.model_routes}
    for e, man in zip(entries, manifests):
        if mode == "internal":
            for alias in man.required_llms:
                if alias not in aliases:
                    errors.append(f"{e.name}: required model {alias!r} is not in the configured model list")
        elif mode == "disabled" and man.required_llms:
            errors.append(f"{e.name}: requires models {', '.join(man.required_llms)} but llm mode is disabled")
        target = compose.target
        if man.languages and target.language not in man.languages:
            errors.append(f"{e.name}: CRS does not support target language {target.language!r}")
        if man.bug_fixing and not target.snapshot:
            errors.append(f"{e.name}: bug-fixing CRS needs a snapshot-capable target")
    return errors


def validate_campaign(compose: ComposeConfig, manifests: list[CrsManifest], host: HostInfo) -> ValidatedPlan:
    errors = campaign_errors(compose, manifests, host)
    if errors:
        raise PlanError(errors)
    key_slot = compose.llm.mode != "disabled"
    return ValidatedPlan(
        compose,
        tuple(
            CrsPlan(e.name, m, e, f"net-{e.name}", key_slot)
            for e, m in zip(compose.crs_entries, manifests)
        ),
    )


def resolve_manifests(compose: ComposeConfig) -> list[CrsManifest]:
    """Load the manifest behind each CRS entry.

    ``crs`` may be a path (file or directory holding ``crs.yaml``) relative to
    the compose file, or a bare name looked up under ``<compose dir>/crs/``
    and then each directory listed in ``OSS_CRS_PATH``.
    """
    manifests = []
    errors = []
    search = [compose.resolve("crs")]
    search += [Path(p) for p in os.environ.get("OSS_CRS_PATH", "").split(os.pathsep) if p]
    for entry in compose.crs_entries:
        candidates = [compose.resolve(entry.crs_ref)] + [d / entry.crs_ref for d in search]
        for cand in candidates:
            if (cand.is_dir() and (cand / "crs.yaml").is_file()) or cand.is_file():
                try:
                    manifests.append(load_manifest(cand))
                except ConfigError as exc:
                    errors += [f"{entry.name}: {e}" for e in exc.errors]
                break
        else:
            errors.append(f"{entry.name}: cannot find CRS {entry.crs_ref!r}")
    if errors:
        raise ConfigError(errors)
    return manifests
