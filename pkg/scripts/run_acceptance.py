#!/usr/bin/env python3
"""Run the nine acceptance criteria and print one PASS/FAIL line for each.

    python3 scripts/run_acceptance.py [extra pytest args]
"""

import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py"

if __name__ == "__main__":
    sys.exit(pytest.main([str(TESTS), "-q", "-p", "no:cacheprovider", *sys.argv[1:]]))
