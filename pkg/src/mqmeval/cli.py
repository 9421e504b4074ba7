"""Command-line front end.

Subcommands cover the full workflow: ``calibrate`` fits the stage-transition
threshold on a validation set, ``evaluate`` runs the three-stage pipeline and
writes a JSONL report, ``score`` turns gold annotations into segment scores,
``spanmatch`` sweeps span-matching thresholds, ``metaeval`` compares metric
scores against gold, and ``report`` summarizes or re-exports a pipeline
report.  Configuration comes from an optional YAML file plus flag overrides;
API keys are only ever read from the environment variable named in the
config, never from flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .calibration import (
    CalibrationError,
    ThresholdStore,
    calibrate_threshold,
    entry_for,
)
from .corpus import (
    Dataset,
    DatasetError,
    gold_score,
    length_bucket,
    load_dataset,
)
from .gateway import Gateway, GatewayError, LiveBackend, MockBackend
from .metrics import (
    MetricsError,
    ScoreSeries,
    aligned_values,
    kendall_tau,
    mae_mse,
    meta_evaluate,
    spearman,
)
from .orchestrator import (
    PipelineContext,
    evaluate_dataset,
    flagged_record_count,
    write_report,
    write_summary,
)
from .prompts import PromptError, PromptLibrary, bundled_demos, load_demos
from .spanmatch import sweep, tokenize, write_sweep_csv
from .typology import Typology, TypologyError, default_typology, load_typology

DEFAULT_THETAS = tuple(round(0.1 * i, 1) for i in range(1, 11))

# Config keys that hold filesystem paths; relative values in a config file
# are resolved against the file's own directory.
_PATH_FIELDS = (
    "segments",
    "annotations",
    "validation_segments",
    "typology",
    "templates",
    "demos",
    "mock",
    "cache_dir",
    "threshold_store",
    "out",
)


class ConfigError(ValueError):
    """Configuration that cannot drive a run (usage error, exit code 2)."""


@dataclass
class RunConfig:
    """Everything a run needs; YAML keys mirror the field names."""

    segments: str | None = None
    annotations: str | None = None
    validation_segments: str | None = None
    typology: str | None = None
    templates: str | None = None
    demos: str | None = None
    model: str = "gpt-4o-mini"
    lang_pair: str = "zh-en"
    endpoint: str | None = None
    api_key_env: str | None = "OPENAI_API_KEY"
    mock: str | None = None
    cache_dir: str | None = None
    max_inflight: int = 8
    requests_per_second: float = 0.0
    threshold: float | None = None
    threshold_store: str | None = None
    percentile: float = 0.6
    max_turns: int = 4
    thetas: tuple[float, ...] = DEFAULT_THETAS
    normalize_errors: bool = True
    epsilon: float | None = None
    out: str = "out"

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"config file {path} has unknown keys: {unknown}")
        if "thetas" in doc and doc["thetas"] is not None:
            doc["thetas"] = tuple(float(t) for t in doc["thetas"])
        base = Path(path).resolve().parent
        for key in _PATH_FIELDS:
            value = doc.get(key)
            if value is not None and not Path(value).is_absolute():
                doc[key] = str(base / value)
        return cls(**doc)

    def digest(self) -> str:
        blob = json.dumps(
            dataclasses.asdict(self), sort_keys=True, ensure_ascii=False, default=str
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _load_typology(cfg: RunConfig) -> Typology:
    if cfg.typology:
        return load_typology(cfg.typology)
    return default_typology()


def _load_library(cfg: RunConfig) -> PromptLibrary:
    if cfg.templates:
        return PromptLibrary.load(cfg.templates)
    return PromptLibrary.bundled()


def _load_demos(cfg: RunConfig, typology: Typology):
    if cfg.demos:
        return load_demos(cfg.demos, typology)
    return bundled_demos()


def build_gateway(cfg: RunConfig) -> Gateway:
    """Construct the completion gateway; exactly one backend must be active."""
    if (cfg.endpoint is None) == (cfg.mock is None):
        raise ConfigError(
            "exactly one of 'endpoint' (live) or 'mock' (transcript) must be set"
        )
    if cfg.mock is not None:
        backend = MockBackend.from_file(cfg.mock)
    else:
        backend = LiveBackend(cfg.endpoint, api_key_env=cfg.api_key_env)
    return Gateway(
        backend,
        cache_dir=cfg.cache_dir,
        max_inflight=cfg.max_inflight,
        requests_per_second=cfg.requests_per_second,
    )


def _context(cfg: RunConfig, typology: Typology, threshold: float) -> PipelineContext:
    return PipelineContext(
        typology=typology,
        gateway=build_gateway(cfg),
        library=_load_library(cfg),
        model=cfg.model,
        lang_pair=cfg.lang_pair,
        demos=tuple(_load_demos(cfg, typology)),
        threshold=threshold,
        max_turns=cfg.max_turns,
    )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_meta(cfg: RunConfig, typology: Typology | None = None, **extra) -> dict:
    meta = {
        "package_version": __version__,
        "config_digest": cfg.digest(),
        "model": cfg.model,
        "lang_pair": cfg.lang_pair,
    }
    if typology is not None:
        meta["typology_digest"] = typology.digest()
    meta.update(extra)
    return meta


# ---------------------------------------------------------------------------
# Score and span TSV helpers

_SCORE_HEADER = ("system", "seg_id", "score")
_SPAN_HEADER = ("system", "seg_id", "span_text")


def _tsv_escape(value: str) -> str:
    return (
        value.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _tsv_unescape(value: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(value):
        if value[i] == "\\" and i + 1 < len(value):
            mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(value[i + 1])
            if mapped is not None:
                out.append(mapped)
                i += 2
                continue
        out.append(value[i])
        i += 1
    return "".join(out)


def _read_tsv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text(encoding="utf-8").split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError(f"{path} is empty")
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        fields = [_tsv_unescape(f) for f in line.split("\t")]
        if len(fields) != len(header):
            raise DatasetError(
                f"{path} row {lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        rows.append(fields)
    return header, rows


def read_scores(path: str | Path) -> ScoreSeries:
    header, rows = _read_tsv(Path(path))
    if header != list(_SCORE_HEADER):
        raise DatasetError(
            f"{path}: bad header {header!r}, expected {list(_SCORE_HEADER)!r}"
        )
    triples = []
    for row in rows:
        try:
            triples.append((row[0], row[1], float(row[2])))
        except ValueError:
            raise DatasetError(f"{path}: score {row[2]!r} is not a number") from None
    return ScoreSeries.from_rows(triples)


def write_scores(series: ScoreSeries, path: str | Path) -> None:
    lines = ["\t".join(_SCORE_HEADER)]
    for (system, seg_id), value in zip(series.keys, series.values):
        lines.append("\t".join((_tsv_escape(system), _tsv_escape(seg_id), str(value))))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_spans(path: str | Path, lang: str) -> dict[tuple[str, str], list]:
    """Read spans from a 3-column span TSV or a full annotations TSV."""
    header, rows = _read_tsv(Path(path))
    if header == list(_SPAN_HEADER):
        triples = [(r[0], r[1], r[2]) for r in rows]
    elif header[:5] == ["system", "seg_id", "subtype", "severity", "span_text"]:
        triples = [(r[0], r[1], r[4]) for r in rows]
    else:
        raise DatasetError(
            f"{path}: bad header {header!r}; expected span or annotation columns"
        )
    spans: dict[tuple[str, str], list] = {}
    for system, seg_id, text in triples:
        span = tokenize(text, lang=lang)
        if len(span) == 0:
            continue
        spans.setdefault((system, seg_id), []).append(span)
    return spans


# ---------------------------------------------------------------------------
# Subcommands

def cmd_calibrate(cfg: RunConfig) -> int:
    segments = cfg.validation_segments or cfg.segments
    if not segments:
        raise ConfigError("calibrate needs a validation set (validation_segments)")
    typology = _load_typology(cfg)
    dataset = load_dataset(segments, name="validation")
    ctx = _context(cfg, typology, threshold=float("-inf"))
    result = calibrate_threshold(
        dataset, ctx, percentile=cfg.percentile, max_workers=cfg.max_inflight
    )
    out = _out_dir(cfg)
    doc = {
        "threshold": result.threshold,
        "percentile": result.percentile,
        "pool_size": result.pool_size,
        "pool": list(result.pool),
        "run": _run_meta(cfg, typology),
    }
    (out / "calibration.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if cfg.threshold_store:
        store = ThresholdStore.load(cfg.threshold_store)
        store.put(entry_for(result, cfg.model, cfg.lang_pair, dataset))
        store.save(cfg.threshold_store)
    print(
        f"calibrated threshold {result.threshold} "
        f"(percentile {result.percentile}, pool size {result.pool_size})"
    )
    return 0


def _resolve_threshold(cfg: RunConfig) -> float:
    if cfg.threshold is not None:
        return float(cfg.threshold)
    if cfg.threshold_store:
        entry = ThresholdStore.load(cfg.threshold_store).get(cfg.model, cfg.lang_pair)
        if entry is not None:
            return entry.threshold
        raise ConfigError(
            f"threshold store has no entry for model={cfg.model!r} "
            f"lang_pair={cfg.lang_pair!r}; run calibrate first"
        )
    raise ConfigError("evaluate needs a threshold (flag, config, or threshold_store)")


def cmd_evaluate(cfg: RunConfig) -> int:
    if not cfg.segments:
        raise ConfigError("evaluate needs a segments file")
    typology = _load_typology(cfg)
    dataset = load_dataset(cfg.segments, cfg.annotations)
    threshold = _resolve_threshold(cfg)
    ctx = _context(cfg, typology, threshold=threshold)
    results = evaluate_dataset(dataset, ctx, max_workers=cfg.max_inflight)
    out = _out_dir(cfg)
    write_report(results, out / "report.jsonl")
    write_summary(
        results,
        out / "summary.json",
        run_meta=_run_meta(cfg, typology, threshold=threshold),
    )
    flagged = flagged_record_count(results)
    print(
        f"evaluated {len(results)} segments "
        f"({sum(len(r.records) for r in results)} records, {flagged} flagged) "
        f"-> {out / 'report.jsonl'}"
    )
    for warning in dataset.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 1 if flagged else 0


def cmd_score(cfg: RunConfig) -> int:
    if not cfg.segments or not cfg.annotations:
        raise ConfigError("score needs both segments and annotations files")
    typology = _load_typology(cfg)
    dataset = load_dataset(cfg.segments, cfg.annotations)
    rows = [
        (seg.system, seg.seg_id, float(gold_score(dataset, typology, seg.system, seg.seg_id)))
        for seg in dataset.segments
    ]
    series = ScoreSeries.from_rows(rows)
    out = _out_dir(cfg)
    write_scores(series, out / "gold_scores.tsv")
    print(f"scored {len(series)} segments -> {out / 'gold_scores.tsv'}")
    for warning in dataset.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def cmd_spanmatch(cfg: RunConfig, detected_path: str, gold_path: str) -> int:
    target_lang = cfg.lang_pair.split("-")[-1]
    detected = read_spans(detected_path, lang=target_lang)
    gold = read_spans(gold_path, lang=target_lang)
    rows = sweep(detected, gold, cfg.thetas)
    out = _out_dir(cfg)
    write_sweep_csv(rows, out / "sweep.csv")
    best = max(rows, key=lambda r: r.f1)
    print(
        f"swept {len(rows)} thresholds -> {out / 'sweep.csv'} "
        f"(best F1 {best.f1:.6f} at theta {best.theta:g})"
    )
    return 0


def cmd_metaeval(cfg: RunConfig, metric_path: str, gold_path: str) -> int:
    metric = read_scores(metric_path)
    gold = read_scores(gold_path)
    report = meta_evaluate(metric, gold, epsilon=cfg.epsilon)
    ma, ga = aligned_values(metric, gold)
    tau = kendall_tau(ma, ga)
    rho = spearman(ma, ga)
    mae, mse = mae_mse(ma, ga, normalize=cfg.normalize_errors)
    out = _out_dir(cfg)
    doc = {
        "meta": report.meta,
        "system_pairwise_accuracy": report.system_pairwise_accuracy,
        "system_pearson": report.system_pearson,
        "segment_accuracy_t": report.segment_accuracy_t,
        "segment_pearson": report.segment_pearson,
        "epsilon": report.epsilon,
        "pairs": report.pairs,
        "segment_agreement": {
            "kendall_tau": tau,
            "spearman": rho,
            "mae": mae,
            "mse": mse,
            "normalized": cfg.normalize_errors,
        },
        "run": _run_meta(cfg),
    }
    (out / "metaeval.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    csv_lines = [
        "meta,system_pairwise_accuracy,system_pearson,segment_accuracy_t,segment_pearson",
        f"{report.meta:.6f},{report.system_pairwise_accuracy:.6f},"
        f"{report.system_pearson:.6f},{report.segment_accuracy_t:.6f},"
        f"{report.segment_pearson:.6f}",
    ]
    (out / "metaeval.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    print(
        f"meta {report.meta:.6f} over {report.pairs} segment pairs "
        f"(epsilon {report.epsilon:g}) -> {out / 'metaeval.json'}"
    )
    return 0


def _read_report_lines(path: str | Path) -> list[dict]:
    lines = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            lines.append(json.loads(line))
        except ValueError:
            raise DatasetError(f"{path} line {lineno} is not valid JSON") from None
    return lines


def cmd_report(
    cfg: RunConfig,
    report_path: str,
    emit_scores: str | None,
    emit_spans: str | None,
) -> int:
    lines = _read_report_lines(report_path)
    scores = {(ln["system"], ln["seg_id"]): float(ln["score"]) for ln in lines}
    flagged = sum(
        1 for ln in lines for rec in ln.get("records", ()) if rec.get("flags")
    )
    confirmed = [
        (ln["system"], ln["seg_id"], f)
        for ln in lines
        for f in ln.get("findings", ())
        if f.get("status") == "confirmed"
    ]
    doc: dict = {
        "segments": len(lines),
        "flagged_records": flagged,
        "confirmed_findings": len(confirmed),
        "mean_score": (sum(scores.values()) / len(scores)) if scores else 0.0,
    }

    if cfg.segments:
        dataset = load_dataset(cfg.segments)
        slices: dict[str, dict] = {}
        for axis in ("domain", "length", "system"):
            groups: dict[str, list[float]] = {}
            for seg in dataset.segments:
                key = (seg.system, seg.seg_id)
                if key not in scores:
                    continue
                label = {
                    "domain": seg.domain,
                    "length": length_bucket(seg),
                    "system": seg.system,
                }[axis]
                groups.setdefault(label, []).append(scores[key])
            slices[axis] = {
                label: {"segments": len(vals), "mean_score": sum(vals) / len(vals)}
                for label, vals in sorted(groups.items())
            }
        doc["slices"] = slices

    out = _out_dir(cfg)
    (out / "report_summary.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    if emit_scores:
        series = ScoreSeries.from_mapping(scores)
        write_scores(series, emit_scores)
    if emit_spans:
        span_lines = ["\t".join(_SPAN_HEADER)]
        for system, seg_id, finding in confirmed:
            span_lines.append(
                "\t".join(
                    (_tsv_escape(system), _tsv_escape(seg_id), _tsv_escape(finding["span"]))
                )
            )
        Path(emit_spans).write_text("\n".join(span_lines) + "\n", encoding="utf-8")

    print(
        f"report: {len(lines)} segments, {len(confirmed)} confirmed findings, "
        f"{flagged} flagged records -> {out / 'report_summary.json'}"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mqmeval",
        description="Hierarchical multi-agent MQM translation evaluation",
    )
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--cache-dir", help="response cache directory")
    parser.add_argument("--mock", help="mock transcript file (offline backend)")
    parser.add_argument("--max-inflight", type=int, help="max concurrent requests")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the stage-transition threshold")
    p.add_argument("--segments", help="validation segments TSV")
    p.add_argument("--percentile", type=float)
    p.add_argument("--model")
    p.add_argument("--lang-pair")
    p.add_argument("--store", help="threshold store JSON to update")

    p = sub.add_parser("evaluate", help="run the evaluation pipeline")
    p.add_argument("--segments")
    p.add_argument("--annotations")
    p.add_argument("--threshold", type=float)
    p.add_argument("--model")
    p.add_argument("--lang-pair")
    p.add_argument("--store", help="threshold store JSON to read")
    p.add_argument("--max-turns", type=int)

    p = sub.add_parser("score", help="score segments from gold annotations")
    p.add_argument("--segments")
    p.add_argument("--annotations")

    p = sub.add_parser("spanmatch", help="sweep span-match thresholds")
    p.add_argument("detected", help="detected spans TSV")
    p.add_argument("gold", help="gold spans or annotations TSV")
    p.add_argument("--thetas", help="comma-separated thresholds")
    p.add_argument("--lang-pair")

    p = sub.add_parser("metaeval", help="compare metric scores against gold")
    p.add_argument("metric", help="metric scores TSV")
    p.add_argument("gold", help="gold scores TSV")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--no-normalize", action="store_true")

    p = sub.add_parser("report", help="summarize a pipeline report")
    p.add_argument("report", help="report JSONL from evaluate")
    p.add_argument("--segments", help="segments TSV for slice breakdowns")
    p.add_argument("--emit-scores", help="write metric scores TSV here")
    p.add_argument("--emit-spans", help="write confirmed spans TSV here")

    return parser


def _merge_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        "cache_dir": getattr(args, "cache_dir", None),
        "mock": getattr(args, "mock", None),
        "max_inflight": getattr(args, "max_inflight", None),
        "out": getattr(args, "out", None),
        "segments": getattr(args, "segments", None),
        "annotations": getattr(args, "annotations", None),
        "model": getattr(args, "model", None),
        "lang_pair": getattr(args, "lang_pair", None),
        "threshold": getattr(args, "threshold", None),
        "percentile": getattr(args, "percentile", None),
        "threshold_store": getattr(args, "store", None),
        "max_turns": getattr(args, "max_turns", None),
        "epsilon": getattr(args, "epsilon", None),
    }
    for field_name, value in overrides.items():
        if value is not None:
            cfg = dataclasses.replace(cfg, **{field_name: value})
    if getattr(args, "command", None) == "calibrate" and args.segments:
        cfg = dataclasses.replace(cfg, validation_segments=args.segments)
    if getattr(args, "thetas", None):
        cfg = dataclasses.replace(
            cfg, thetas=tuple(float(t) for t in str(args.thetas).split(","))
        )
    if getattr(args, "no_normalize", False):
        cfg = dataclasses.replace(cfg, normalize_errors=False)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "score":
            return cmd_score(cfg)
        if args.command == "spanmatch":
            return cmd_spanmatch(cfg, args.detected, args.gold)
        if args.command == "metaeval":
            return cmd_metaeval(cfg, args.metric, args.gold)
        if args.command == "report":
            return cmd_report(cfg, args.report, args.emit_scores, args.emit_spans)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (
        DatasetError,
        TypologyError,
        PromptError,
        MetricsError,
        CalibrationError,
        GatewayError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
