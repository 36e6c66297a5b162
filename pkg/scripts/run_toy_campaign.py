#!/usr/bin/env python3
"""Run the bundled toy campaign through all three phases and summarize the report.

    python3 scripts/run_toy_campaign.py [--dir DIR] [--timeout 60s] [--keep]
"""

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

from osscrs import cli
from osscrs.toy import materialize


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dir", type=Path, help="working directory (default: a fresh temporary one)")
    p.add_argument("--timeout", default="60s")
    p.add_argument("--keep", action="store_true", help="keep the temporary directory")
    p.add_argument("-v", "--verbose", action="count", default=0)
    args = p.parse_args(argv)

    work = args.dir or Path(tempfile.mkdtemp(prefix="oss-crs-toy-"))
    compose = materialize(work / "toy")
    out = work / "out"
    verbosity = ["-v"] * args.verbose
    try:
        for phase in ("prepare", "build-target", "run"):
            extra = ["--timeout", args.timeout] if phase == "run" else []
            rc = cli.main([phase, "-f", str(compose), "--out", str(out), *verbosity, *extra])
            if rc != 0:
                print(f"{phase} failed with exit code {rc}", file=sys.stderr)
                return rc
        report = json.loads((out / "campaign-report.json").read_text())
        print(f"ended by {report['ended_by']} after {report['wall_seconds']}s")
        print(f"exchange: {report['exchange']}")
        for pov in report["povs"]:
            print(f"pov {pov['hash'][:16]} from {pov['origin']}")
        for patch in report["validated_patches"]:
            print(f"validated patch {patch['diff_hash'][:16]} ({patch['build']}) fixes {len(patch['povs'])} pov(s)")
        print(f"full report: {out / 'campaign-report.json'}")
        return 0
    finally:
        if args.dir is None and not args.keep:
            shutil.rmtree(work, ignore_errors=True)
        elif args.dir is None:
            print(f"kept {work}")


if __name__ == "__main__":
    sys.exit(main())
