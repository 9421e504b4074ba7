#!/usr/bin/env python3
"""Noise-robustness experiment for the metric meta-evaluation suite.

Builds a synthetic gold standard (per-system quality offsets plus
per-segment difficulty), derives metric scores by adding Gaussian noise
of increasing strength, and reports how each meta-evaluation component
and their mean degrade.  At zero noise every component must be exactly
1.0; the experiment is deterministic for a fixed seed.

Usage:
    python3 scripts/meta_noise_experiment.py [--systems 6] [--segments 25]
                                             [--seed 0] [--out out/meta_noise.csv]
"""

from __future__ import annotations

import argparse
import csv
import random
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from mqmeval.metrics import ScoreSeries, meta_evaluate

NOISE_LEVELS = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0)


def synthetic_gold(n_systems: int, n_segments: int, rng: random.Random) -> ScoreSeries:
    quality = [rng.uniform(-4.0, 0.0) for _ in range(n_systems)]
    difficulty = [rng.uniform(-2.0, 0.0) for _ in range(n_segments)]
    rows = [
        (f"sys{i:02d}", f"{j}", quality[i] + difficulty[j] + rng.gauss(0.0, 0.05))
        for i in range(n_systems)
        for j in range(n_segments)
    ]
    return ScoreSeries.from_rows(rows)


def noisy_metric(gold: ScoreSeries, sigma: float, rng: random.Random) -> ScoreSeries:
    rows = [
        (system, seg_id, value + rng.gauss(0.0, sigma))
        for (system, seg_id), value in zip(gold.keys, gold.values)
    ]
    return ScoreSeries.from_rows(rows)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--systems", type=int, default=6)
    parser.add_argument("--segments", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=str(REPO_ROOT / "out" / "meta_noise.csv"))
    args = parser.parse_args(argv)

    rng = random.Random(args.seed)
    gold = synthetic_gold(args.systems, args.segments, rng)
    print(
        f"synthetic gold: {args.systems} systems x {args.segments} segments "
        f"(seed {args.seed})"
    )
    header = ("sigma", "sys_pairwise_acc", "sys_pearson", "seg_accuracy_t", "seg_pearson", "meta")
    print(" ".join(f"{h:>16}" for h in header))

    rows = []
    for sigma in NOISE_LEVELS:
        metric = noisy_metric(gold, sigma, random.Random(args.seed + 1))
        report = meta_evaluate(metric, gold)
        values = (
            sigma,
            report.system_pairwise_accuracy,
            report.system_pearson,
            report.segment_accuracy_t,
            report.segment_pearson,
            report.meta,
        )
        rows.append(values)
        print(" ".join(f"{v:>16.4f}" for v in values))
        if sigma == 0.0 and report.meta != 1.0:
            print("FAIL: zero-noise meta score must be exactly 1.0", file=sys.stderr)
            return 1

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
