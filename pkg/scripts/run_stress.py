#!/usr/bin/env python3
"""Energy-stressed long-horizon comparison: 1 J battery, energy-heavy cost,
100 slots per episode.  Full scale is expensive; pass --episodes/--seeds to
shrink for a quick look.
"""
import sys

from mecoffload.cli import main

if __name__ == "__main__":
    sys.exit(main(["stress", "--out", "out/stress", *sys.argv[1:]]))
