import json
import os
import subprocess
import sys

import pytest

from osscrs import libcrs
from osscrs.exchange import ArtifactType, ExchangeStore, content_hash


@pytest.fixture
def mounts(tmp_path, monkeypatch):
    dirs = {}
    for var, name in (("OSS_CRS_CONTROL_DIR", "control"), ("OSS_CRS_FETCH_DIR", "fetch"),
                      ("OSS_CRS_SHARED_DIR", "shared"), ("OSS_CRS_BUILD_OUTPUT_DIR", "build-output"),
                      ("OSS_CRS_EXCHANGE_DIR", "exchange")):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.setenv(var, str(d))
        dirs[name] = d
    monkeypatch.setenv("OSS_CRS_NAME", "atl")
    monkeypatch.delenv("OSS_CRS_BUILDER_URL", raising=False)
    return dirs


def run(*argv):
    return libcrs.main(list(argv))


def test_submit_build_output(mounts, tmp_path, capsys):
    src = tmp_path / "out"
    (src / "sub").mkdir(parents=True)
    (src / "fuzzer").write_bytes(b"\x7fELF")
    (src / "sub" / "dict").write_text("kw")
    assert run("submit-build-output", "fuzzers", str(src)) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["files"] == 2 and info["warnings"] == []
    manifest = json.loads((mounts["build-output"] / ".manifests" / "fuzzers.json").read_text())
    assert manifest["crs"] == "atl" and {f["path"] for f in manifest["files"]} == {"fuzzer", "sub/dict"}
    # a name is published once
    assert run("submit-build-output", "fuzzers", str(src)) == 1
    assert "already published" in capsys.readouterr().err


def test_empty_build_output_warns(mounts, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("submit-build-output", "nothing", str(tmp_path / "empty")) == 0
    assert "empty" in json.loads(capsys.readouterr().out)["warnings"][0]


def test_build_output_usage_errors(mounts, tmp_path):
    assert run("submit-build-output", "../x", str(tmp_path)) == 64
    assert run("submit-build-output", "x", str(tmp_path / "missing")) == 64


def test_register_submit_dir_is_idempotent(mounts, capsys):
    seeds = mounts["shared"] / "seeds"
    assert run("register-submit-dir", "seed", str(seeds)) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "registered"
    assert run("register-submit-dir", "seeds", str(seeds)) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "already-registered"
    records = (mounts["control"] / libcrs.REGISTRATIONS).read_text().splitlines()
    assert len(records) == 1
    rec = json.loads(records[0])
    assert rec["artifact_type"] == "seed" and rec["crs_name"] == "atl" and seeds.is_dir()


def test_register_outside_mounts_refused(mounts, tmp_path):
    assert run("register-submit-dir", "pov", str(tmp_path / "elsewhere")) == 64
    assert run("register-submit-dir", "exploit", str(mounts["shared"] / "x")) == 64


def test_register_fetch_dir_may_use_fetch_mount(mounts):
    assert run("register-fetch-dir", str(mounts["fetch"] / "mine")) == 0


def test_register_shared_dir_moves_contents(mounts, tmp_path):
    work = mounts["control"] / "work"
    work.mkdir()
    (work / "state").write_text("keep")
    assert run("register-shared-dir", str(work)) == 0
    assert work.is_symlink()
    assert (work / "state").read_text() == "keep"
    assert mounts["shared"] in work.resolve().parents
    assert run("register-shared-dir", str(work)) == 0  # idempotent


def test_submit_and_fetch(mounts, tmp_path, capsys):
    pov = tmp_path / "crash-1"
    pov.write_bytes(b"boom")
    assert run("submit", "pov", str(pov)) == 0
    assert capsys.readouterr().out.strip() == content_hash(b"boom")
    assert run("submit", "pov", str(pov)) == 0
    assert capsys.readouterr().out.strip() == f"duplicate({content_hash(b'boom')})"
    assert run("fetch", "povs", str(tmp_path / "got")) == 0
    assert (tmp_path / "got" / content_hash(b"boom")).read_bytes() == b"boom"
    assert ExchangeStore(mounts["exchange"]).index()[0]["origin"] == "atl"
    assert run("submit", "pov", str(tmp_path / "missing")) == 64


def test_unavailable_when_not_mounted(mounts, tmp_path, monkeypatch):
    monkeypatch.setenv("OSS_CRS_EXCHANGE_DIR", str(tmp_path / "nowhere"))
    (tmp_path / "f").write_bytes(b"x")
    assert run("submit", "seed", str(tmp_path / "f")) == 69
    assert run("apply-patch-build", str(tmp_path / "f")) == 69


def test_builder_unreachable(mounts, tmp_path, monkeypatch):
    monkeypatch.setenv("OSS_CRS_BUILDER_URL", "http://127.0.0.1:9")
    (tmp_path / "p.diff").write_text("x")
    assert run("apply-patch-build", str(tmp_path / "p.diff")) == 69


def test_bad_usage_exit_code(mounts):
    assert run("no-such-command") == 64
    assert run("submit") == 64


def test_builder_client_against_service(mounts, make_builder, tmp_path, monkeypatch, capsys):
    from osscrs.builder.server import BuilderServer
    from osscrs.toy import patch_text

    server = BuilderServer(make_builder())
    monkeypatch.setenv("OSS_CRS_BUILDER_URL", f"http://127.0.0.1:{server.start()}")
    try:
        pov = tmp_path / "pov"
        pov.write_bytes(b"CRASH")
        diff = tmp_path / "fix.diff"
        diff.write_text(patch_text("correct"))
        assert run("run-pov", str(pov), "toy_fuzzer", "--build", "base") == 1
        assert run("apply-patch-build", str(diff)) == 0
        assert json.loads((mounts["control"] / libcrs.LAST_BUILD).read_text())["build"] == "patch-1"
        # later calls default to the last successful build
        assert run("run-pov", str(pov), "toy_fuzzer") == 0
        assert run("run-test") == 0
        assert run("run-pov", str(pov), "toy_fuzzer", "--build", "patch-7") == 1
        assert "404" in capsys.readouterr().err
    finally:
        server.stop()


def test_zipapp_runs_with_bare_interpreter(tmp_path, mounts):
    app = libcrs.build_zipapp(tmp_path / "bin" / "libcrs")
    assert os.access(app, os.X_OK)
    seed = tmp_path / "seed"
    seed.write_bytes(b"zip")
    env = {k: v for k, v in os.environ.items() if k.startswith("OSS_CRS_")}
    env["PATH"] = os.path.dirname(sys.executable)
    # -I -S: no site-packages, so only what the archive carries is importable
    proc = subprocess.run([sys.executable, "-I", "-S", str(app), "submit", "seed", str(seed)],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == content_hash(b"zip")
    proc = subprocess.run([sys.executable, "-I", "-S", str(app), "builder-step", "bogus"],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 64
    assert ExchangeStore(mounts["exchange"]).contains(ArtifactType.SEED, content_hash(b"zip"))
