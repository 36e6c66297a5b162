import json
import threading
import time
from pathlib import Path

import pytest

from osscrs import lifecycle
from osscrs.config import load_compose, resolve_manifests, validate_campaign
from osscrs.exchange import ArtifactType, ExchangeStore
from osscrs.config import InitialInputs
from osscrs.lifecycle import (
    PLUMBING_VARS, TABLE_VARS, CampaignBusy, InfrastructureError, InputError, PhaseError, PhaseFailure,
    campaign_lock, inject_env, open_campaign, redact, seed_initial_inputs,
)
from osscrs.llmproxy import issue_keys
from osscrs.runtime.mock import DEFAULT_HOST
from osscrs.toy import materialize, write_compose


def plan_of(path):
    compose = load_compose(path)
    return validate_campaign(compose, resolve_manifests(compose), DEFAULT_HOST)


def custom_crs(root: Path, name: str, script: str, *, crs_type="bug-finding", build_fails=False) -> None:
    d = root / "crs" / name
    d.mkdir(parents=True)
    (d / "run.sh").write_text(script)
    (d / "Dockerfile").write_text("FROM python:3.11-slim\nCOPY run.sh /crs/run.sh\n"
                                  + ("RUN exit 9\n" if build_fails else "")
                                  + 'CMD ["bash", "/crs/run.sh"]\n')
    (d / "crs.yaml").write_text(f"name: {name}\ntype: {crs_type}\ncrs_run_phase:\n"
                                "  main: {dockerfile: Dockerfile}\n")


def built(compose_path, out):
    campaign = open_campaign(plan_of(compose_path), out, "mock")
    campaign.prepare()
    campaign.build_target()
    return campaign


# ---- environment contract

def test_inject_env_contract(toy):
    plan = plan_of(toy)
    env = inject_env(plan, "fixer", builder_urls={"fixer": "http://127.0.0.1:1"})
    assert {k: env[k] for k in TABLE_VARS} == {
        "OSS_CRS_TARGET": "toy-parser", "OSS_CRS_TARGET_HARNESS": "toy_fuzzer", "OSS_CRS_NAME": "fixer",
        "OSS_CRS_CPUSET": "4-7", "OSS_CRS_MEMORY_LIMIT": "4G", "OSS_CRS_LLM_API_URL": "",
        "OSS_CRS_LLM_API_KEY": "",
    }
    assert set(env) - set(TABLE_VARS) <= set(PLUMBING_VARS)
    assert env["OSS_CRS_BUILDER_URL"] == "http://127.0.0.1:1"
    fuzzer = inject_env(plan, "fuzzer", builder_urls={"fixer": "http://127.0.0.1:1"})
    assert "OSS_CRS_BUILDER_URL" not in fuzzer
    with pytest.raises(lifecycle.LifecycleError):
        inject_env(plan, "ghost")


def test_inject_env_keys_differ_per_crs(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    path = write_compose(root, [("a", "toy-fuzzer", "0-3", "2G"), ("b", "toy-fixer", "4-7", "2G")])
    text = path.read_text().replace("mode: disabled", "mode: internal\n  models: [{alias: m, model: m, endpoint: 'http://x'}]")
    path.write_text(text)
    plan = plan_of(path)
    keys = issue_keys(plan)
    a = inject_env(plan, "a", "http://proxy/v1", keys)
    b = inject_env(plan, "b", "http://proxy/v1", keys)
    assert a["OSS_CRS_LLM_API_KEY"] and a["OSS_CRS_LLM_API_KEY"] != b["OSS_CRS_LLM_API_KEY"]
    assert a["OSS_CRS_LLM_API_URL"] == "http://proxy/v1"
    assert redact(a)["OSS_CRS_LLM_API_KEY"] == "<redacted>"


# ---- initial inputs

def test_seed_initial_inputs(toy, tmp_path):
    store = ExchangeStore(tmp_path / "ex")
    inputs = InitialInputs("inputs/corpus", "inputs/recent-change.diff", "inputs/report.sarif")
    counts = seed_initial_inputs(inputs, store, toy.parent)
    assert counts == {"seed": 2, "diff": 1, "bug-candidate": 1, "skipped": 0}
    assert store.count(ArtifactType.SEED) == 2


def test_invalid_sarif_and_diff_rejected(tmp_path):
    (tmp_path / "bad.sarif").write_text(json.dumps({"version": "2.1.0"}))
    (tmp_path / "bad.diff").write_text("not a diff\n")
    store = ExchangeStore(tmp_path / "ex")
    with pytest.raises(InputError, match="runs"):
        seed_initial_inputs(InitialInputs(sarif_file="bad.sarif"), store, tmp_path)
    with pytest.raises(InputError, match="unified diff"):
        seed_initial_inputs(InitialInputs(diff_file="bad.diff"), store, tmp_path)
    with pytest.raises(InputError, match="cannot read"):
        seed_initial_inputs(InitialInputs(diff_file="missing.diff"), store, tmp_path)
    assert store.entries() == set()


# ---- phases

def test_phase_order_enforced(toy, tmp_path):
    campaign = open_campaign(plan_of(toy), tmp_path / "out", "mock")
    with pytest.raises(PhaseError, match="phase is 'new', expected 'prepared'"):
        campaign.build_target()
    with pytest.raises(PhaseError, match="expected 'built'"):
        campaign.run()
    campaign.prepare()
    campaign.prepare()  # re-running prepare is allowed and hits the cache
    assert ("cached", "fixer-tools:prep") in campaign.runtime.events
    campaign.build_target()
    with pytest.raises(PhaseError):
        campaign.prepare()
    assert json.loads((tmp_path / "out" / "state.json").read_text())["phase"] == "built"


def test_state_survives_process_boundary(built_toy):
    reopened = open_campaign(built_toy["plan"], built_toy["out"], "mock")
    assert reopened.phase == "built"
    assert reopened.state.snapshot["image_tag"] == "toy-parser-snapshot:target"
    assert reopened.build_outputs.verify("fuzzer", "fuzzer-bin")
    with pytest.raises(PhaseError, match="runtime"):
        open_campaign(built_toy["plan"], built_toy["out"], "engine")


def test_changed_compose_is_refused(toy, tmp_path):
    campaign = open_campaign(plan_of(toy), tmp_path / "out", "mock")
    campaign.prepare()
    toy.write_text(toy.read_text().replace('"4-7"', '"8-11"'))
    again = open_campaign(plan_of(toy), tmp_path / "out", "mock")
    with pytest.raises(PhaseError, match="compose file changed"):
        again.build_target()


def test_build_failure_names_the_crs(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    custom_crs(root, "flaky", "true\n", build_fails=True)
    path = write_compose(root, [("fuzzer", "toy-fuzzer", "0-3", "2G"), ("flaky", "flaky", "4", "1G")])
    campaign = built(path, tmp_path / "out")
    with pytest.raises(PhaseFailure) as info:
        campaign.run(5)
    assert info.value.crs == "flaky" and "RUN exited with 9" in str(info.value)
    assert campaign.phase == "built"


def test_target_compile_failure(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    (root / "projects" / "toy-parser" / "parse.c").write_text("this is not C\n")
    campaign = open_campaign(plan_of(root / "crs-compose.yaml"), tmp_path / "out", "mock")
    campaign.prepare()
    with pytest.raises(PhaseFailure) as info:
        campaign.build_target()
    assert info.value.crs == "fuzzer"  # the fuzzer's build step compiles first
    assert campaign.phase == "prepared"


def test_lock_rejects_second_process(tmp_path):
    with campaign_lock(tmp_path):
        with pytest.raises(CampaignBusy):
            with campaign_lock(tmp_path):
                pass
    with campaign_lock(tmp_path):
        pass


# ---- run

def test_timeout_and_wiring(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    path = write_compose(root, [("seeder", "toy-seeder", "2,3", "1G")],
                         inputs={"corpus": "inputs/corpus", "sarif": "inputs/report.sarif"})
    campaign = built(path, tmp_path / "out")
    t0 = time.monotonic()
    report = campaign.run(3)
    assert 2.5 < time.monotonic() - t0 < 20
    assert report["ended_by"] == "timeout" and report["status"] == "completed"
    assert report["crses"]["seeder"]["containers"] == {"main": "killed"}
    assert report["crses"]["seeder"]["artifacts"]["seed"] == 3
    assert report["initial_inputs"]["bug-candidate"] == 1
    assert report["exchange"]["seed"] == 5
    # the fetch dir got both the operator corpus and the CRS's own seeds
    assert len(list((tmp_path / "out" / "crs" / "seeder" / "fetch" / "seeds").iterdir())) == 5
    assert campaign.phase == "finished"
    spec = campaign.containers[0].spec
    mounts = {m.container_path: m.mode for m in spec.mounts}
    assert mounts == {"/oss-crs/control": "rw", "/oss-crs/exchange": "rw", "/oss-crs/fetch": "ro",
                      "/oss-crs/shared": "rw"}
    assert spec.cpuset.canonical == "2-3" and spec.network == "net-seeder"
    transcript = json.loads((tmp_path / "out" / "env" / "seeder.main.json").read_text())
    assert transcript["OSS_CRS_CPUSET"] == "2-3"
    with pytest.raises(PhaseError):
        campaign.run(1)


def test_terminate_stops_everything(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    path = write_compose(root, [("seeder", "toy-seeder", "0", "1G")])
    campaign = built(path, tmp_path / "out")
    threading.Thread(target=lambda: (campaign.started.wait(10), time.sleep(0.5), campaign.terminate())).start()
    report = campaign.run()
    assert report["ended_by"] == "terminated" and report["timeout"] is None
    assert all(h.done for h in campaign.handles())
    assert campaign.phase == "finished"


def test_failed_start_does_not_abort(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    d = root / "crs" / "ghost"
    d.mkdir(parents=True)
    (d / "Dockerfile").write_text("FROM scratch\n")
    (d / "crs.yaml").write_text("name: ghost\ntype: bug-finding\ncrs_run_phase:\n"
                                "  main: {dockerfile: Dockerfile, entrypoint: [/no/such/binary]}\n")
    path = write_compose(root, [("seeder", "toy-seeder", "0", "1G"), ("ghost", "ghost", "1", "1G")])
    campaign = built(path, tmp_path / "out")
    report = campaign.run(2)
    assert report["status"] == "completed"
    assert report["crses"]["ghost"]["containers"]["main"].startswith("failed-to-start(")
    assert report["crses"]["seeder"]["artifacts"]["seed"] == 3


def test_infrastructure_failure_aborts(tmp_path, monkeypatch):
    root = tmp_path / "toy"
    materialize(root)
    path = write_compose(root, [("seeder", "toy-seeder", "0", "1G")])
    campaign = built(path, tmp_path / "out")
    t0 = time.monotonic()
    monkeypatch.setattr(lifecycle._Services, "dead",
                        lambda self: "exchange-sidecar" if time.monotonic() - t0 > 1 else None)
    with pytest.raises(InfrastructureError, match="exchange-sidecar"):
        campaign.run(30)
    report = json.loads((tmp_path / "out" / "campaign-report.json").read_text())
    assert report["status"] == "aborted" and report["ended_by"] == "infrastructure-failure"
    assert all(h.done for h in campaign.handles())


def test_invalid_inputs_fail_before_start(tmp_path):
    root = tmp_path / "toy"
    materialize(root)
    (root / "bad.sarif").write_text("{}")
    path = write_compose(root, [("seeder", "toy-seeder", "0", "1G")], inputs={"sarif": "bad.sarif"})
    campaign = built(path, tmp_path / "out")
    with pytest.raises(InputError):
        campaign.run(1)
    assert campaign.phase == "built" and campaign.handles() == []


def test_registration_translation_refuses_escape(built_toy, tmp_path):
    campaign = open_campaign(built_toy["plan"], built_toy["out"], "mock")
    shared = campaign.crs_dir("fuzzer", "shared")
    shared.mkdir(parents=True, exist_ok=True)
    inside = campaign.translate("fuzzer", {"dir": "/oss-crs/shared/seeds"})
    assert inside == (shared / "seeds").resolve()
    assert campaign.translate("fuzzer", {"dir": "/etc", "resolved": "/etc"}) is None
    assert campaign.translate("fuzzer", {"dir": "/oss-crs/exchange/seeds"}) is None
