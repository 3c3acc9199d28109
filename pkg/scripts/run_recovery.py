#!/usr/bin/env python3
"""Constructive local recovery on generated truth, with a stability probe.

Extra arguments pass through to the CLI, e.g. --delta 1e-2.
"""
import sys

from siv.harness_cli import main

if __name__ == "__main__":
    sys.exit(main(["local-recover", "--out", "results/recovery",
                   *sys.argv[1:]]))
