#!/usr/bin/env python3
"""Run seeded random scenarios and report convergence.

    python3 scripts/random_scenarios.py [--count 200] [--first-seed 0] [--devices 32] [--events 100]

Exits non-zero if any scenario ends with members disagreeing.
"""

import argparse
import collections
import sys
import time

from gracybus.scenario import random_scenario, run_scenario


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--devices", type=int, default=32)
    p.add_argument("--events", type=int, default=100)
    args = p.parse_args()

    start = time.time()
    diverged = []
    notes = collections.Counter()
    sizes = []
    for seed in range(args.first_seed, args.first_seed + args.count):
        report = run_scenario(random_scenario(seed, max_devices=args.devices, n_events=args.events))
        if not report.converged:
            diverged.append(seed)
        sizes.append(len(report.members))
        for ev in report.events:
            if ev.note:
                notes[ev.note.split(":")[0]] += 1
    took = time.time() - start
    print(f"{args.count} scenarios in {took:.1f}s, {args.count - len(diverged)} converged")
    print(f"final group size: min {min(sizes)} max {max(sizes)} mean {sum(sizes) / len(sizes):.1f}")
    for note, n in notes.most_common():
        print(f"  {n:6d}  {note}")
    if diverged:
        print(f"diverged seeds: {diverged}")
    return 1 if diverged else 0


if __name__ == "__main__":
    sys.exit(main())
