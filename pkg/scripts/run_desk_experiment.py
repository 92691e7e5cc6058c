#!/usr/bin/env python3
"""Run the shipped desk-scale experiment grid.

Equivalent to `bbeval run --config scripts/paper_desk.json`; flags are
forwarded. The full nine-defense, six-adversary, six-attack grid takes a
while; trim it for a smoke run, e.g.:

    python scripts/run_desk_experiment.py --seed 7 --output out/smoke \
        --set 'attacks.kinds=["fgsm","mim"]' \
        --set 'adversaries.mixed_fractions=[1.0]' \
        --set 'defenses=[{"kind":"vanilla"},{"kind":"buzz"}]'
"""

import os
import sys

from bbeval.cli import dispatch

CONFIG = os.path.join(os.path.dirname(__file__), "paper_desk.json")


def main():
    argv = sys.argv[1:]
    if "--config" not in argv:
        argv = ["--config", CONFIG] + argv
    return dispatch(["run"] + argv)


if __name__ == "__main__":
    sys.exit(main())
