import itertools
import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from osscrs.builder import BASE_REF, BuilderError, FifoLock, UnknownBuild
from osscrs.builder.server import BuilderServer, parse_multipart
from osscrs.builder.service import BuildResult, PovResult, TestResult
from osscrs.builder.step import is_crash
from osscrs.libcrs import multipart
from osscrs.toy import patch_text
from oracles import EXPECTED_MATRIX

CRASH = b"key=CRASH"


@pytest.mark.parametrize("rc,out,crash", [
    (0, "", False), (1, "assertion text", False), (134, "", True), (-11, "", True),
    (1, "==1==ERROR: AddressSanitizer: heap-use-after-free", True),
    (0, "ERROR: libFuzzer: deadly signal", True),
])
def test_is_crash(rc, out, crash):
    assert is_crash(rc, out) is crash


def test_fifo_lock_serves_in_arrival_order():
    lock = FifoLock()
    order = []
    lock.__enter__()
    threads = []
    for i in range(5):
        t = threading.Thread(target=lambda i=i: (lock.__enter__(), order.append(i), lock.__exit__()))
        t.start()
        threads.append(t)
        time.sleep(0.05)  # make arrival order unambiguous
    lock.__exit__()
    for t in threads:
        t.join()
    assert order == list(range(5))


def test_multipart_roundtrip():
    body, ctype = multipart({"harness": "fuzz", "build": "patch-1"}, {"pov": ("p.bin", b"\x00\xffdata")})
    fields = parse_multipart(ctype, body)
    assert fields == {"harness": b"fuzz", "build": b"patch-1", "pov": b"\x00\xffdata"}


class FakeService:
    crs_name = "fake"

    def __init__(self):
        self.calls = []

    def apply_patch_build(self, diff):
        self.calls.append(("build", diff))
        return BuildResult("ok", "", 0.1, "patch-1", "h")

    def run_pov(self, build, pov, harness):
        if build == "nope":
            raise UnknownBuild("unknown build 'nope'")
        self.calls.append(("pov", build, pov, harness))
        return PovResult("no_crash", "", build or BASE_REF)

    def run_test(self, build):
        if build == "broken":
            raise BuilderError("step failed")
        return TestResult("tests_passed", "", build or BASE_REF)


def _req(url, data=None, ctype="application/json"):
    req = urllib.request.Request(url, data=data, method="POST" if data is not None else "GET",
                                 headers={"Content-Type": ctype})
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_server_routes():
    svc = FakeService()
    server = BuilderServer(svc)
    base = f"http://127.0.0.1:{server.start()}"
    try:
        assert _req(base + "/health") == (200, {"status": "ok"})
        status, body = _req(base + "/patch-build", b"--- a/x\n", "text/x-diff")
        assert status == 200 and body["build"] == "patch-1"
        data, ctype = multipart({"harness": "h", "build": "patch-1"}, {"pov": ("p", b"xy")})
        assert _req(base + "/run-pov", data, ctype)[1]["status"] == "no_crash"
        assert svc.calls[-1] == ("pov", "patch-1", b"xy", "h")
        data, ctype = multipart({"harness": "h", "build": "nope"}, {"pov": ("p", b"xy")})
        assert _req(base + "/run-pov", data, ctype)[0] == 404
        data, ctype = multipart({"build": "x"}, {})
        assert _req(base + "/run-pov", data, ctype)[0] == 400
        assert _req(base + "/run-test", b'{"build": "broken"}')[0] == 400
        assert _req(base + "/run-test", b"")[1]["build"] == BASE_REF
        assert _req(base + "/elsewhere", b"")[0] == 404
        assert server.alive
    finally:
        server.stop()


# ---- against the compiled toy target

def run_row(svc, name):
    build = svc.apply_patch_build(patch_text(name))
    if build.status != "ok":
        return (build.status, None, None)
    pov = svc.run_pov(build.patched_image_ref, CRASH, "toy_fuzzer").status
    test = svc.run_test(build.patched_image_ref).status
    return (build.status, pov, test)


def test_base_build_reproduces_crash(make_builder):
    svc = make_builder()
    assert svc.run_pov(None, CRASH, "toy_fuzzer").status == "crash_reproduced"
    assert svc.run_pov(BASE_REF, b"a,b", "toy_fuzzer").status == "no_crash"
    assert svc.run_test(None).status == "tests_passed"


def test_matrix_rows(make_builder):
    svc = make_builder()
    for name, expected in EXPECTED_MATRIX.items():
        assert run_row(svc, name) == expected, name


def test_broken_patch_fails_build(make_builder):
    svc = make_builder()
    result = svc.apply_patch_build(patch_text("broken"))
    assert result.status == "build_failed" and "error" in result.log
    assert result.patched_image_ref is None


def test_unknown_build_and_missing_harness(make_builder):
    svc = make_builder()
    with pytest.raises(UnknownBuild):
        svc.run_pov("patch-99", CRASH, "toy_fuzzer")
    with pytest.raises(BuilderError):
        svc.run_pov(None, CRASH, "no_such_harness")


def test_builds_are_isolated_and_validated(make_builder):
    svc = make_builder()
    good = svc.apply_patch_build(patch_text("correct"))
    bad = svc.apply_patch_build(patch_text("nonfixing"))
    assert good.patched_image_ref != bad.patched_image_ref
    # the earlier patched build is unaffected by the later one
    assert svc.run_pov(good.patched_image_ref, CRASH, "toy_fuzzer").status == "no_crash"
    assert svc.run_pov(bad.patched_image_ref, CRASH, "toy_fuzzer").status == "crash_reproduced"
    svc.run_test(good.patched_image_ref)
    svc.run_test(bad.patched_image_ref)
    validated = svc.validated_patches()
    assert [v["build"] for v in validated] == [good.patched_image_ref]
    assert all(s.network == "none" and s.cpuset.canonical == "4-7" for s in svc.specs)


def test_concurrent_requests_are_serialized(make_builder):
    svc = make_builder()
    active = []
    peak = []
    original = svc._run_step

    def tracking(*a, **kw):
        active.append(1)
        peak.append(len(active))
        try:
            return original(*a, **kw)
        finally:
            active.pop()

    svc._run_step = tracking
    threads = [threading.Thread(target=svc.run_pov, args=(None, CRASH, "toy_fuzzer")) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert max(peak) == 1 and len(svc.history) == 4


def test_order_permutation_does_not_change_rows(make_builder):
    names = list(EXPECTED_MATRIX)
    for perm in itertools.islice(itertools.permutations(names), 0, 24, 11):
        svc = make_builder()
        rows = {name: run_row(svc, name) for name in perm}
        assert rows == EXPECTED_MATRIX
