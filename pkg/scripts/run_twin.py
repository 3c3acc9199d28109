#!/usr/bin/env python3
"""Desk-scale twin experiment: reconstruct from the scalar, write eps(t).

Extra arguments pass through to the CLI, e.g. --set seed=3.
"""
import sys

from siv.harness_cli import main

if __name__ == "__main__":
    sys.exit(main(["reconstruct", "--out", "results/twin", *sys.argv[1:]]))
