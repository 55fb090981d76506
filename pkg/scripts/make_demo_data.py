#!/usr/bin/env python3
"""Simulate the demo cohort used by configs/ard_demo.yaml.

A register-style follow-up population: gender-dependent death rates, two
diabetes-treatment indicators that raise the alcohol-related-death risk among
the deceased, and follow-up timing that ends either at the study close (2013)
or at death.  Alive subjects can never carry the outcome — the structural
zero the stratified model encodes.
"""

import argparse
import csv
import os

import numpy as np


def simulate(n: int, seed: int):
    rng = np.random.default_rng(seed)
    male = rng.random(n) < 0.52
    insulin = rng.random(n) < 0.22
    oad = rng.random(n) < 0.45

    death_base = np.where(male, 0.16, 0.11)
    p_dead = np.clip(death_base + 0.03 * insulin + 0.02 * oad, 0, 1)
    dead = rng.random(n) < p_dead

    ard_base = np.where(male, 0.10, 0.05)
    p_ard = np.clip(ard_base + 0.16 * insulin + 0.10 * oad, 0, 1)
    ard = dead & (rng.random(n) < p_ard)

    start = rng.uniform(1990.0, 2012.0, n)
    # dead subjects exit somewhere inside their window; alive ones at 2013
    exit_at = np.where(dead, start + rng.random(n) * (2013.0 - start), 2013.0)
    followup = exit_at - start

    rows = []
    for i in range(n):
        rows.append(
            [
                "male" if male[i] else "female",
                "dead" if dead[i] else "alive",
                "yes" if insulin[i] else "no",
                "yes" if oad[i] else "no",
                "yes" if ard[i] else "no",
                f"{start[i]:.4f}",
                f"{followup[i]:.4f}",
            ]
        )
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="output CSV path")
    parser.add_argument("--n", type=int, default=50000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    header = ["gender", "dead", "insulin", "oad", "ard_death", "start_year", "followup_years"]
    with open(args.out, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(simulate(args.n, args.seed))
    print(f"wrote {args.n} records to {args.out}")


if __name__ == "__main__":
    main()
