"""oss-crs: validate a campaign and drive its three phases.

    oss-crs validate     -f crs-compose.yaml
    oss-crs prepare      -f crs-compose.yaml [--out DIR] [--runtime mock|engine]
    oss-crs build-target -f crs-compose.yaml [--out DIR]
    oss-crs run          -f crs-compose.yaml [--out DIR] [--timeout 60s]

Exit codes follow sysexits: 0 ok, 1 invalid plan, 65 phase out of order,
66 unreadable input, 69 runtime/service unavailable, 70 phase step failed,
75 output directory busy.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from pathlib import Path

from osscrs.config import ConfigError, HostInfo, load_compose, resolve_manifests, campaign_errors, validate_campaign

EX_OK = 0
EX_INVALID = 1
EX_DATAERR = 65
EX_NOINPUT = 66
EX_UNAVAILABLE = 69
EX_SOFTWARE = 70
EX_TEMPFAIL = 75

log = logging.getLogger("oss-crs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oss-crs", description="Run ensembles of cyber reasoning systems.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in (("validate", "check a compose file and print every problem"),
                       ("prepare", "build CRS images"),
                       ("build-target", "compile the target and capture build outputs"),
                       ("run", "launch the campaign")):
        s = sub.add_parser(name, help=text)
        s.add_argument("-f", "--file", dest="compose", type=Path, default=Path("crs-compose.yaml"),
                       help="compose file (default: %(default)s)")
        s.add_argument("--runtime", choices=("mock", "engine"),
                       default=os.environ.get("OSS_CRS_RUNTIME", "mock"))
        s.add_argument("-v", "--verbose", action="count", default=0)
        if name != "validate":
            s.add_argument("--out", type=Path, help="campaign output directory (default: compose out_dir)")
        if name == "run":
            s.add_argument("--timeout", help="campaign duration, e.g. 60s or 1h (overrides the compose file)")
    return p


def _host(runtime_kind: str) -> HostInfo:
    if runtime_kind == "mock":
        from osscrs.runtime.mock import DEFAULT_HOST, _host_from_env

        return _host_from_env() or DEFAULT_HOST
    return HostInfo.detect()


def _plan(args):
    """Load and validate; returns (plan, compose) or raises ConfigError / OSError."""
    compose = load_compose(args.compose)
    manifests = resolve_manifests(compose)
    return validate_campaign(compose, manifests, _host(args.runtime)), compose


def cmd_validate(args) -> int:
    try:
        compose = load_compose(args.compose)
        manifests = resolve_manifests(compose)
    except OSError as exc:
        print(f"error: cannot read {args.compose}: {exc.strerror}", file=sys.stderr)
        return EX_NOINPUT
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}")
        return EX_INVALID
    errors = campaign_errors(compose, manifests, _host(args.runtime))
    for e in errors:
        print(f"error: {e}")
    if errors:
        return EX_INVALID
    plan = validate_campaign(compose, manifests, _host(args.runtime))
    print("plan OK")
    for name, wiring in plan.wiring().items():
        print(f"  {name}: cpuset={wiring['cpuset']} memory={wiring['memory']} network={wiring['network']}"
              f"{' builder' if wiring['builder'] else ''}")
    return EX_OK


def cmd_phase(args) -> int:
    from osscrs import lifecycle
    from osscrs.config import parse_duration
    from osscrs.runtime.base import ContainerRuntimeError

    try:
        plan, compose = _plan(args)
    except OSError as exc:
        print(f"error: cannot read {exc.filename or args.compose}: {exc.strerror}", file=sys.stderr)
        return EX_NOINPUT
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EX_INVALID
    out_dir = args.out or compose.resolve(compose.out_dir)
    timeout = None
    if getattr(args, "timeout", None):
        try:
            timeout = parse_duration(args.timeout)
        except ConfigError as exc:
            print(f"error: --timeout: {exc}", file=sys.stderr)
            return EX_INVALID

    try:
        with lifecycle.campaign_lock(Path(out_dir)):
            campaign = lifecycle.open_campaign(plan, out_dir, args.runtime)
            if args.command == "prepare":
                images = campaign.prepare()
                print(f"prepared: {sum(len(t) for t in images.values())} image(s)")
            elif args.command == "build-target":
                state = campaign.build_target()
                print(f"built: target {state.target_base}"
                      + (f", snapshot {state.snapshot['image_tag']}" if state.snapshot else ""))
            else:
                previous = {sig: signal.signal(sig, lambda *_: campaign.terminate())
                            for sig in (signal.SIGINT, signal.SIGTERM)}
                try:
                    report = campaign.run(timeout)
                finally:
                    for sig, handler in previous.items():
                        signal.signal(sig, handler)
                print(json.dumps({k: report[k] for k in ("status", "ended_by", "exchange", "wall_seconds")}))
                print(f"report: {Path(out_dir) / 'campaign-report.json'}")
    except lifecycle.PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_DATAERR
    except lifecycle.CampaignBusy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_TEMPFAIL
    except lifecycle.InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_DATAERR
    except lifecycle.InfrastructureError as exc:
        print(f"error: campaign aborted: {exc}", file=sys.stderr)
        return EX_UNAVAILABLE
    except lifecycle.PhaseFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_SOFTWARE
    except ContainerRuntimeError as exc:
        print(f"error: container runtime: {exc}", file=sys.stderr)
        return EX_UNAVAILABLE
    return EX_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return cmd_validate(args)
    return cmd_phase(args)


if __name__ == "__main__":
    sys.exit(main())
