#!/usr/bin/env python3
"""Sweep span-match thresholds for pipeline findings against gold spans.

Runs the pipeline offline on one golden case, collects the confirmed
error spans, and sweeps the token-overlap threshold theta to show how
span precision/recall/F1 trade off as the match criterion tightens.

Usage:
    python3 scripts/sweep_span_thresholds.py [--config data/golden/case1/config.yaml]
                                             [--thetas 0.1,0.2,...] [--out out/sweep]
"""

from __future__ import annotations

import argparse
import sys
from collections import defaultdict
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from mqmeval import load_dataset, tokenize
from mqmeval.cli import DEFAULT_THETAS, RunConfig
from mqmeval.orchestrator import FindingStatus, evaluate_dataset
from mqmeval.spanmatch import sweep, write_sweep_csv

from run_golden_cases import _context  # noqa: E402  (sibling script helper)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--config", default=str(REPO_ROOT / "data" / "golden" / "case1" / "config.yaml")
    )
    parser.add_argument("--thetas", default=",".join(f"{t:g}" for t in DEFAULT_THETAS))
    parser.add_argument("--out", default=str(REPO_ROOT / "out" / "sweep"))
    args = parser.parse_args(argv)

    cfg = RunConfig.from_file(args.config)
    ctx = _context(cfg)
    dataset = load_dataset(cfg.segments, cfg.annotations)
    results = evaluate_dataset(dataset, ctx, max_workers=cfg.max_inflight)
    lang = cfg.lang_pair.split("-")[-1]

    detected: dict[tuple[str, str], list] = defaultdict(list)
    for res in results:
        for finding in res.final_findings:
            if finding.status is FindingStatus.CONFIRMED and finding.span_text:
                detected[(res.system, res.seg_id)].append(
                    tokenize(finding.span_text, lang=lang)
                )
    gold: dict[tuple[str, str], list] = defaultdict(list)
    for ann in dataset.gold:
        if ann.span_text:
            gold[(ann.system, ann.seg_id)].append(tokenize(ann.span_text, lang=lang))

    thetas = tuple(float(t) for t in args.thetas.split(","))
    rows = sweep(detected, gold, thetas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")

    n_detected = sum(len(v) for v in detected.values())
    n_gold = sum(len(v) for v in gold.values())
    print(f"confirmed spans: {n_detected}, gold spans: {n_gold}")
    print(f"{'theta':>6} {'precision':>10} {'recall':>8} {'f1':>8}")
    for row in rows:
        print(f"{row.theta:>6.2f} {row.precision:>10.4f} {row.recall:>8.4f} {row.f1:>8.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
