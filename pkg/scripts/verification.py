"""Analytic verification checks (acceptance criteria 1-5) with their report lines.

Usage: python scripts/verification.py [--all]

Runs the analytic acceptance tests through pytest; ``--all`` also runs the
plate and surrogate benchmarks (about 30 minutes on one core).  The
``CRITERION n`` lines are also written to ``acceptance_report.txt``.
"""

import argparse
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--all", action="store_true", help="include the long benchmarks (criteria 6-10)")
    args = ap.parse_args()
    sel = [] if args.all else ["-k", " or ".join(f"criterion_{i}_" for i in range(1, 6))]
    return pytest.main([os.path.join(ROOT, "tests", "test_acceptance.py"), "-q", "-p", "no:cacheprovider"] + sel)


if __name__ == "__main__":
    sys.exit(main())
