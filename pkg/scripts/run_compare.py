#!/usr/bin/env python3
"""All five policies across seeds on the desk-scale preset.

Roughly an hour for the full 5x10 grid; pass a seed count to shrink it.
"""
import sys

from mecoffload.cli import main

if __name__ == "__main__":
    seeds = sys.argv[1] if len(sys.argv) > 1 else "10"
    sys.exit(main([
        "compare", "--preset", "smoke", "--seeds", seeds,
        "--out", "out/smoke_compare", "--emit-plot-script",
    ]))
