#!/usr/bin/env python3
"""Train the co-selection policy on the desk-scale preset and print the trend.

Takes a couple of minutes on one core; writes metrics + checkpoint to
out/smoke_train/.
"""
import sys

from mecoffload.cli import main

if __name__ == "__main__":
    seed = sys.argv[1] if len(sys.argv) > 1 else "0"
    sys.exit(main([
        "train", "--preset", "smoke", "--policy", "ucms", "--seed", seed,
        "--out", "out/smoke_train", "--emit-plot-script",
    ]))
