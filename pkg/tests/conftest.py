from __future__ import annotations

import contextlib
import time
from pathlib import Path

import pytest

from osscrs.builder import BuilderService, Snapshot
from osscrs.config import CpuSet, load_compose, resolve_manifests, validate_campaign
from osscrs.lifecycle import open_campaign
from osscrs.runtime.mock import DEFAULT_HOST, MockRuntime
from osscrs.toy import materialize


def load_plan(compose_path: Path):
    compose = load_compose(compose_path)
    return validate_campaign(compose, resolve_manifests(compose), DEFAULT_HOST)


@pytest.fixture
def toy(tmp_path) -> Path:
    """A fresh copy of the toy campaign; returns its compose file."""
    return materialize(tmp_path / "toy")


@pytest.fixture(scope="session")
def built_toy(tmp_path_factory):
    """The toy campaign taken through prepare and build-target once per session."""
    root = tmp_path_factory.mktemp("built-toy")
    compose_path = materialize(root / "toy")
    plan = load_plan(compose_path)
    out = root / "out"
    campaign = open_campaign(plan, out, "mock")
    campaign.prepare()
    campaign.build_target()
    return {"plan": plan, "out": out, "campaign": campaign, "root": root / "toy"}


@pytest.fixture
def make_builder(built_toy, tmp_path):
    """Factory for builder services over the toy snapshot."""
    def factory(name: str = "fixer") -> BuilderService:
        runtime = MockRuntime(built_toy["out"] / ".runtime")
        snapshot = Snapshot(**built_toy["campaign"].state.snapshot)
        return BuilderService(runtime, snapshot, name, CpuSet((4, 5, 6, 7), "4-7"), 4 * 1024**3,
                              tmp_path / f"builder-{name}")
    return factory


# ---- acceptance reporting: one PASS/FAIL line per criterion, printed in the terminal summary

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``with criterion(n, limit_seconds, title) as detail:`` times the body and records a verdict.

    Fills in ``detail`` (a dict) to add facts to the printed line. The body
    failing or overrunning its time limit fails the test.
    """
    @contextlib.contextmanager
    def run(number: int, limit: float, title: str):
        detail: dict = {}
        t0 = time.monotonic()
        error = None
        try:
            yield detail
        except BaseException as exc:
            error = exc
            raise
        finally:
            elapsed = time.monotonic() - t0
            ok = error is None and elapsed < limit
            facts = "".join(f"{k}={v}, " for k, v in detail.items())
            reason = "" if error is None else f"; {type(error).__name__}: {str(error).splitlines()[0][:120] if str(error) else ''}"
            line = (f"criterion {number}: {'PASS' if ok else 'FAIL'} ({title}; {facts}"
                    f"t={elapsed:.2f}s < {limit:g}s{reason})")
            request.config.stash.setdefault(_VERDICTS, {})[number] = line
            print(line)
        assert elapsed < limit, f"criterion {number} took {elapsed:.2f}s, limit {limit:g}s"
    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
