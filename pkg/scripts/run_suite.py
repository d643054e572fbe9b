"""Run the full preset suite and print a per-check summary table.

Usage: python3 scripts/run_suite.py [--output-dir runs] [--names a,b,...]
"""

import argparse
import sys
import time

from ardlab.errors import PresetCheckError
from ardlab.presets import PRESET_NAMES, run_preset


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", default="runs")
    parser.add_argument(
        "--names", default=",".join(PRESET_NAMES),
        help="comma-separated preset names (default: all seven)",
    )
    args = parser.parse_args(argv)

    failures = 0
    total = time.perf_counter()
    for name in args.names.split(","):
        start = time.perf_counter()
        try:
            result = run_preset(name.strip(), output_dir=args.output_dir)
        except PresetCheckError as exc:
            failures += 1
            print(f"{name:<14} FAIL  {exc}")
            continue
        elapsed = time.perf_counter() - start
        checks = " ".join(sorted(result.checks))
        print(f"{name:<14} ok    {elapsed:6.1f}s  checks: {checks}")
    print(f"total {time.perf_counter() - total:.1f}s, artifacts in {args.output_dir}/")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
