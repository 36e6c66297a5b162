"""Content-addressed artifact exchange and the sidecar that keeps it in sync.

Layout under the exchange root::

    seeds/ povs/ patches/ bug-candidates/ diffs/   one file per artifact, named by SHA-256
    index.jsonl                                    provenance, one JSON object per admitted artifact
    .tmp/ .lock

Only the standard library is used here: ``libcrs`` ships this module into
CRS containers.
"""

from __future__ import annotations

import enum
import fcntl
import hashlib
import json
import logging
import os
import shutil
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

log = logging.getLogger(__name__)


class ArtifactType(str, enum.Enum):
    SEED = "seed"
    POV = "pov"
    PATCH = "patch"
    BUG_CANDIDATE = "bug-candidate"
    DIFF = "diff"

    @property
    def dirname(self) -> str:
        return _DIRNAMES[self]

    @classmethod
    def parse(cls, text: str) -> "ArtifactType":
        """Accept either the type name (``pov``) or its directory name (``povs``)."""
        for t in cls:
            if text in (t.value, t.dirname):
                return t
        raise ValueError(f"unknown artifact type {text!r}; expected one of "
                         f"{', '.join(t.value for t in cls)}")


_DIRNAMES = {
    ArtifactType.SEED: "seeds",
    ArtifactType.POV: "povs",
    ArtifactType.PATCH: "patches",
    ArtifactType.BUG_CANDIDATE: "bug-candidates",
    ArtifactType.DIFF: "diffs",
}


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ArtifactRecord:
    type: ArtifactType
    hash: str
    size: int
    origin: str
    first_seen: float
    original_name: str | None = None

    def to_json(self) -> dict:
        return {
            "hash": self.hash, "type": self.type.value, "size": self.size,
            "origin": self.origin, "first_seen": self.first_seen,
            "original_name": self.original_name,
        }


@dataclass(frozen=True)
class IngestResult:
    status: str  # "admitted" | "duplicate" | "rejected"
    hash: str

    @property
    def admitted(self) -> bool:
        return self.status == "admitted"


class DedupStrategy(Protocol):
    """Decides whether an artifact whose (type, hash) is new enters the store.

    Strategies can only narrow admission: the store already drops exact
    duplicates before consulting them.
    """

    name: str

    def admit(self, record: ArtifactRecord, data: bytes, store: "ExchangeStore") -> bool: ...


class HashDedup:
    name = "hash"

    def admit(self, record: ArtifactRecord, data: bytes, store: "ExchangeStore") -> bool:
        return not store.contains(record.type, record.hash)


class ExchangeStore:
    """The shared store. Safe for concurrent writers across threads and processes."""

    def __init__(self, root: Path | str, strategy: DedupStrategy | None = None):
        self.root = Path(root)
        self.strategy = strategy or HashDedup()
        self._tmp = self.root / ".tmp"
        self._mutex = threading.Lock()
        for t in ArtifactType:
            (self.root / t.dirname).mkdir(parents=True, exist_ok=True)
        self._tmp.mkdir(exist_ok=True)
        (self.root / "index.jsonl").touch(exist_ok=True)

    # the rename hook exists so tests can interpose failures
    _rename: Callable[[str, str], None] = staticmethod(os.rename)

    def path_of(self, type: ArtifactType, digest: str) -> Path:
        return self.root / type.dirname / digest

    def contains(self, type: ArtifactType, digest: str) -> bool:
        return self.path_of(type, digest).exists()

    def entries(self, type: ArtifactType | None = None) -> set[tuple[ArtifactType, str]]:
        types = [type] if type else list(ArtifactType)
        out = set()
        for t in types:
            for p in (self.root / t.dirname).iterdir():
                if not p.name.startswith("."):
                    out.add((t, p.name))
        return out

    def count(self, type: ArtifactType) -> int:
        return len(self.entries(type))

    def index(self) -> list[dict]:
        with open(self.root / "index.jsonl") as f:
            return [json.loads(line) for line in f if line.strip()]

    def ingest(self, type: ArtifactType, data: bytes, origin: str,
               original_name: str | None = None) -> IngestResult:
        type = ArtifactType(type)
        digest = content_hash(data)
        final = self.path_of(type, digest)
        if final.exists():
            return IngestResult("duplicate", digest)
        tmp = self._tmp / f"{digest}.{uuid.uuid4().hex}"
        try:
            with open(tmp, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.chmod(tmp, 0o444)
            with self._locked():
                if final.exists():
                    return IngestResult("duplicate", digest)
                record = ArtifactRecord(type, digest, len(data), origin, time.time(), original_name)
                if not self.strategy.admit(record, data, self):
                    return IngestResult("rejected", digest)
                self._rename(str(tmp), str(final))
                with open(self.root / "index.jsonl", "a") as idx:
                    idx.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
            return IngestResult("admitted", digest)
        finally:
            try:
                tmp.unlink()
            except FileNotFoundError:
                pass

    def _locked(self):
        return _StoreLock(self._mutex, self.root / ".lock")


class _StoreLock:
    def __init__(self, mutex: threading.Lock, path: Path):
        self.mutex = mutex
        self.path = path
        self.fd = None

    def __enter__(self):
        self.mutex.acquire()
        self.fd = os.open(self.path, os.O_CREAT | os.O_RDWR, 0o644)
        fcntl.flock(self.fd, fcntl.LOCK_EX)

    def __exit__(self, *exc):
        fcntl.flock(self.fd, fcntl.LOCK_UN)
        os.close(self.fd)
        self.mutex.release()


# --------------------------------------------------------------------------
# Registrations and synchronization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Registration:
    crs_name: str
    kind: str  # submit | fetch | shared
    dir: Path
    artifact_type: ArtifactType | None = None

    def __post_init__(self):
        if self.kind not in ("submit", "fetch", "shared"):
            raise ValueError(f"unknown registration kind {self.kind!r}")
        if self.kind == "submit" and self.artifact_type is None:
            raise ValueError("submit registrations need an artifact type")


@dataclass
class SyncStats:
    scanned: int = 0
    admitted: int = 0
    duplicates: int = 0
    rejected: int = 0
    mirrored: int = 0
    skipped: int = 0

    def __iadd__(self, other: "SyncStats") -> "SyncStats":
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self


@dataclass
class SyncState:
    """Per-sidecar memory of already-ingested submit files, keyed by (path, size, mtime)."""

    seen: dict[str, tuple[int, int]] = field(default_factory=dict)


# files younger than this may still be mid-write by the CRS
SETTLE_SECONDS = 0.05


def _ignored(name: str) -> bool:
    return name.startswith(".") or name.endswith((".tmp", ".part"))


def sync_once(registrations: Iterable[Registration], store: ExchangeStore,
              state: SyncState | None = None, now: float | None = None) -> SyncStats:
    """Ingest every submit dir, then mirror the whole store into every fetch dir."""
    state = state if state is not None else SyncState()
    now = time.time() if now is None else now
    stats = SyncStats()
    regs = list(registrations)
    for reg in regs:
        if reg.kind != "submit" or not reg.dir.is_dir():
            continue
        for path in sorted(reg.dir.rglob("*")):
            if _ignored(path.name) or not path.is_file():
                continue
            try:
                st = path.stat()
            except OSError:
                continue
            key = str(path)
            stamp = (st.st_size, st.st_mtime_ns)
            if state.seen.get(key) == stamp:
                continue
            if now - st.st_mtime < SETTLE_SECONDS:
                continue
            stats.scanned += 1
            try:
                data = path.read_bytes()
            except OSError as exc:
                log.warning("skipping unreadable submit file %s: %s", path, exc)
                stats.skipped += 1
                continue
            try:
                res = store.ingest(reg.artifact_type, data, reg.crs_name, path.name)
            except OSError as exc:
                # not marked seen, so the next poll retries it
                log.warning("ingest of %s failed: %s", path, exc)
                stats.skipped += 1
                continue
            state.seen[key] = stamp
            if res.status == "admitted":
                stats.admitted += 1
            elif res.status == "duplicate":
                stats.duplicates += 1
            else:
                stats.rejected += 1

    entries = store.entries()
    for reg in regs:
        if reg.kind == "fetch":
            stats.mirrored += mirror_into(store, reg.dir, entries)
    return stats


def mirror_into(store: ExchangeStore, fetch_dir: Path,
                entries: set[tuple[ArtifactType, str]] | None = None) -> int:
    """Additively copy store entries missing from ``fetch_dir``; returns how many were added."""
    entries = store.entries() if entries is None else entries
    added = 0
    made = set()
    for t, digest in sorted(entries):
        dest = fetch_dir / t.dirname / digest
        if dest.exists():
            continue
        if t not in made:
            dest.parent.mkdir(parents=True, exist_ok=True)
            made.add(t)
        src = store.path_of(t, digest)
        try:
            os.link(src, dest)
        except FileExistsError:
            continue
        except OSError:
            tmp = dest.with_name(f".{digest}.{uuid.uuid4().hex}")
            shutil.copyfile(src, tmp)
            os.replace(tmp, dest)
        added += 1
    return added


def run_sidecar(registrations: Callable[[], Iterable[Registration]] | Iterable[Registration],
                store: ExchangeStore, poll_interval: float, stop: threading.Event,
                on_sync: Callable[[SyncStats], None] | None = None) -> SyncStats:
    """Poll until ``stop`` is set; the iteration in progress always completes.

    ``registrations`` may be a callable so newly registered directories are
    picked up on the next poll.
    """
    if poll_interval <= 0:
        raise ValueError("poll_interval must be > 0")
    state = SyncState()
    total = SyncStats()
    while True:
        regs = registrations() if callable(registrations) else registrations
        try:
            stats = sync_once(regs, store, state)
            total += stats
            if on_sync:
                on_sync(stats)
        except Exception:
            log.exception("exchange sync iteration failed; continuing")
        if stop.wait(poll_interval):
            break
    # one last pass so artifacts submitted just before shutdown are not lost
    try:
        total += sync_once(registrations() if callable(registrations) else registrations, store, state,
                           now=time.time() + SETTLE_SECONDS)
    except Exception:
        log.exception("final exchange sync failed")
    return total


def fetch_into(store_or_dir: ExchangeStore | Path, type: ArtifactType, dest: Path) -> int:
    """One-shot copy of every artifact of ``type`` into ``dest``; returns the count present."""
    root = store_or_dir.root if isinstance(store_or_dir, ExchangeStore) else Path(store_or_dir)
    src_dir = root / type.dirname
    dest.mkdir(parents=True, exist_ok=True)
    count = 0
    if not src_dir.is_dir():
        return 0
    for src in sorted(src_dir.iterdir()):
        if _ignored(src.name) or not src.is_file():
            continue
        target = dest / src.name
        if not target.exists():
            tmp = dest / f".{src.name}.{uuid.uuid4().hex}"
            shutil.copyfile(src, tmp)
            os.replace(tmp, target)
        count += 1
    return count
