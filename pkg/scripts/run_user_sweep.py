#!/usr/bin/env python3
"""Total-cost scaling as the user count grows (desk-scale servers).

Uses short training runs per point; pass n-start/n-stop/n-step to override.
"""
import sys

from mecoffload.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--n-start", "12", "--n-stop", "36", "--n-step", "12"]
    sys.exit(main([
        "sweep-users", "--preset", "smoke", "--episodes", "30", "--seeds", "5",
        "--out", "out/user_sweep", *args,
    ]))
