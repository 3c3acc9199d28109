#!/usr/bin/env python3
"""Desk-scale two-regime stability sweep; pass --resume to continue one.

Extra arguments pass through to the CLI, e.g. --set deltas=1e-4,1e-2.
"""
import sys

from siv.harness_cli import main

if __name__ == "__main__":
    sys.exit(main(["stability-sweep", "--out", "results/sweep",
                   *sys.argv[1:]]))
