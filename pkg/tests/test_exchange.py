import multiprocessing
import os
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st, HealthCheck

from osscrs.exchange import (
    ArtifactType, ExchangeStore, Registration, SyncState, content_hash, fetch_into, mirror_into,
    run_sidecar, sync_once,
)


def test_artifact_type_parse():
    assert ArtifactType.parse("povs") is ArtifactType.POV
    assert ArtifactType.parse("bug-candidate").dirname == "bug-candidates"
    with pytest.raises(ValueError):
        ArtifactType.parse("exploit")


def test_ingest_is_content_addressed(tmp_path):
    store = ExchangeStore(tmp_path)
    first = store.ingest(ArtifactType.SEED, b"abc", "a", "x")
    again = store.ingest(ArtifactType.SEED, b"abc", "b", "y")
    assert first.status == "admitted" and first.hash == content_hash(b"abc")
    assert again.status == "duplicate"
    assert store.path_of(ArtifactType.SEED, first.hash).read_bytes() == b"abc"
    # the same bytes under another type are a different artifact
    assert store.ingest(ArtifactType.POV, b"abc", "a").admitted
    index = store.index()
    assert len(index) == 2 and index[0]["origin"] == "a"


def test_store_files_are_read_only(tmp_path):
    store = ExchangeStore(tmp_path)
    h = store.ingest(ArtifactType.SEED, b"x", "a").hash
    assert store.path_of(ArtifactType.SEED, h).stat().st_mode & 0o222 == 0


def test_custom_strategy_can_only_narrow(tmp_path):
    class SmallOnly:
        name = "small"

        def admit(self, record, data, store):
            return len(data) < 4

    store = ExchangeStore(tmp_path, SmallOnly())
    assert store.ingest(ArtifactType.SEED, b"ok", "a").admitted
    assert store.ingest(ArtifactType.SEED, b"too big", "a").status == "rejected"
    assert store.ingest(ArtifactType.SEED, b"ok", "a").status == "duplicate"


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.binary(max_size=8), max_size=40))
def test_store_holds_exactly_the_distinct_contents(tmp_path_factory, blobs):
    store = ExchangeStore(tmp_path_factory.mktemp("x"))
    statuses = [store.ingest(ArtifactType.SEED, b, "a").status for b in blobs]
    assert {h for _, h in store.entries()} == {content_hash(b) for b in blobs}
    assert statuses.count("admitted") == len(set(blobs))


def test_concurrent_threads_admit_once(tmp_path):
    store = ExchangeStore(tmp_path)
    results = []
    barrier = threading.Barrier(8)

    def writer():
        barrier.wait()
        results.extend(store.ingest(ArtifactType.SEED, b"same", "t").status for _ in range(20))

    threads = [threading.Thread(target=writer) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count("admitted") == 1
    assert store.count(ArtifactType.SEED) == 1
    assert len(store.index()) == 1


def _proc_writer(root, n):
    store = ExchangeStore(root)
    for i in range(n):
        store.ingest(ArtifactType.SEED, str(i % 10).encode(), f"p{os.getpid()}")


def test_concurrent_processes_admit_once(tmp_path):
    ExchangeStore(tmp_path)
    procs = [multiprocessing.Process(target=_proc_writer, args=(tmp_path, 30)) for _ in range(4)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    store = ExchangeStore(tmp_path)
    assert store.count(ArtifactType.SEED) == 10
    assert len(store.index()) == 10


def test_rename_failure_leaves_no_partial(tmp_path, monkeypatch):
    store = ExchangeStore(tmp_path)

    def boom(src, dst):
        raise OSError("injected")

    monkeypatch.setattr(store, "_rename", boom)
    with pytest.raises(OSError):
        store.ingest(ArtifactType.SEED, b"data", "a")
    assert store.entries() == set()
    assert list((tmp_path / ".tmp").iterdir()) == []
    assert store.index() == []


def _registrations(tmp_path, n):
    regs = []
    for i in range(n):
        sub = tmp_path / f"crs{i}" / "submit"
        fetch = tmp_path / f"crs{i}" / "fetch"
        sub.mkdir(parents=True)
        fetch.mkdir(parents=True)
        regs += [Registration(f"crs{i}", "submit", sub, ArtifactType.SEED),
                 Registration(f"crs{i}", "fetch", fetch)]
    return regs


def test_sync_once_ingests_and_mirrors(tmp_path):
    store = ExchangeStore(tmp_path / "ex")
    regs = _registrations(tmp_path, 2)
    (regs[0].dir / "s1").write_bytes(b"one")
    (regs[2].dir / "s2").write_bytes(b"one")
    (regs[2].dir / ".hidden").write_bytes(b"skip me")
    (regs[2].dir / "half.part").write_bytes(b"skip me")
    state = SyncState()
    stats = sync_once(regs, store, state, now=time.time() + 1)
    assert (stats.admitted, stats.duplicates) == (1, 1)
    for fetch in (regs[1].dir, regs[3].dir):
        assert [p.name for p in (fetch / "seeds").iterdir()] == [content_hash(b"one")]
    again = sync_once(regs, store, state, now=time.time() + 1)
    assert again.scanned == 0 and again.mirrored == 0


def test_sync_waits_for_files_to_settle(tmp_path):
    store = ExchangeStore(tmp_path / "ex")
    regs = _registrations(tmp_path, 1)
    (regs[0].dir / "fresh").write_bytes(b"new")
    assert sync_once(regs, store, now=time.time()).scanned == 0
    assert sync_once(regs, store, now=time.time() + 1).admitted == 1


def test_mirror_is_additive(tmp_path):
    store = ExchangeStore(tmp_path / "ex")
    store.ingest(ArtifactType.POV, b"p", "a")
    fetch = tmp_path / "fetch"
    (fetch / "povs").mkdir(parents=True)
    (fetch / "povs" / "local-note").write_text("mine")
    assert mirror_into(store, fetch) == 1
    assert (fetch / "povs" / "local-note").exists()
    assert mirror_into(store, fetch) == 0


def test_fetch_into(tmp_path):
    store = ExchangeStore(tmp_path / "ex")
    for b in (b"a", b"b"):
        store.ingest(ArtifactType.SEED, b, "x")
    assert fetch_into(store, ArtifactType.SEED, tmp_path / "dest") == 2
    assert fetch_into(tmp_path / "ex", ArtifactType.POV, tmp_path / "none") == 0


def test_sidecar_picks_up_late_registrations_and_final_pass(tmp_path):
    store = ExchangeStore(tmp_path / "ex")
    regs = []
    stop = threading.Event()
    t = threading.Thread(target=run_sidecar, args=(lambda: list(regs), store, 0.05, stop))
    t.start()
    regs += _registrations(tmp_path, 1)
    time.sleep(0.2)
    (regs[0].dir / "late").write_bytes(b"late")
    stop.set()
    t.join(5)
    assert store.contains(ArtifactType.SEED, content_hash(b"late"))


def test_sidecar_rejects_bad_interval(tmp_path):
    with pytest.raises(ValueError):
        run_sidecar([], ExchangeStore(tmp_path), 0, threading.Event())


def test_registration_validation():
    with pytest.raises(ValueError):
        Registration("a", "submit", "/x")
    with pytest.raises(ValueError):
        Registration("a", "bogus", "/x")
