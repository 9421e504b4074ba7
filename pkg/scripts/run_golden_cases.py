#!/usr/bin/env python3
"""Replay the bundled golden cases end to end, entirely offline.

Each case directory holds a config, a segment/annotation corpus, and a
scripted chat transcript.  The script runs the full three-stage pipeline
against the transcript, prints per-segment outcomes next to the gold
MQM scores, and writes the usual report/summary artifacts per case.

Usage:
    python3 scripts/run_golden_cases.py [--cases-dir data/golden] [--out out/golden]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from mqmeval import default_typology, gold_score, load_dataset, load_typology
from mqmeval.cli import RunConfig, build_gateway
from mqmeval.orchestrator import (
    FindingStatus,
    PipelineContext,
    evaluate_dataset,
    flagged_record_count,
    write_report,
    write_summary,
)
from mqmeval.prompts import PromptLibrary, bundled_demos, load_demos


def _context(cfg: RunConfig) -> PipelineContext:
    typology = load_typology(cfg.typology) if cfg.typology else default_typology()
    library = PromptLibrary.load(cfg.templates) if cfg.templates else PromptLibrary.bundled()
    demos = load_demos(cfg.demos, typology) if cfg.demos else bundled_demos()
    if cfg.threshold is None:
        raise SystemExit(f"case config has no threshold: {cfg}")
    return PipelineContext(
        typology=typology,
        gateway=build_gateway(cfg),
        library=library,
        model=cfg.model,
        lang_pair=cfg.lang_pair,
        demos=tuple(demos),
        threshold=cfg.threshold,
        max_turns=cfg.max_turns,
    )


def run_case(case_dir: Path, out_root: Path) -> tuple[int, int]:
    cfg = RunConfig.from_file(case_dir / "config.yaml")
    ctx = _context(cfg)
    dataset = load_dataset(cfg.segments, cfg.annotations)
    results = evaluate_dataset(dataset, ctx, max_workers=cfg.max_inflight)
    out = out_root / case_dir.name
    out.mkdir(parents=True, exist_ok=True)
    write_report(results, out / "report.jsonl")
    write_summary(results, out / "summary.json")

    flagged = flagged_record_count(results)
    print(f"\n=== {case_dir.name} ({cfg.lang_pair}, threshold {cfg.threshold:g}) ===")
    print(f"{'system':<8} {'seg':<6} {'pipeline':>9} {'gold':>9}  confirmed findings")
    for res in results:
        confirmed = [
            f for f in res.final_findings if f.status is FindingStatus.CONFIRMED
        ]
        label = "; ".join(
            f"{f.severity.value} {f.subtype} {f.span_text!r}" for f in confirmed
        ) or "-"
        gold = float(gold_score(dataset, ctx.typology, res.system, res.seg_id))
        print(
            f"{res.system:<8} {res.seg_id:<6} {float(res.score):>9.2f} "
            f"{gold:>9.2f}  {label}"
        )
    print(
        f"records: {sum(len(r.records) for r in results)}, "
        f"flagged: {flagged}, backend calls: {ctx.gateway.stats['backend_calls']}, "
        f"artifacts: {out}/"
    )
    return len(results), flagged


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--cases-dir", default=str(REPO_ROOT / "data" / "golden"))
    parser.add_argument("--out", default=str(REPO_ROOT / "out" / "golden"))
    args = parser.parse_args(argv)

    cases = sorted(p for p in Path(args.cases_dir).iterdir() if (p / "config.yaml").exists())
    if not cases:
        print(f"no cases under {args.cases_dir}", file=sys.stderr)
        return 2
    total_segments = 0
    total_flagged = 0
    for case_dir in cases:
        segments, flagged = run_case(case_dir, Path(args.out))
        total_segments += segments
        total_flagged += flagged
    print(f"\nreplayed {len(cases)} cases, {total_segments} segments, {total_flagged} flagged")
    return 1 if total_flagged else 0


if __name__ == "__main__":
    raise SystemExit(main())
