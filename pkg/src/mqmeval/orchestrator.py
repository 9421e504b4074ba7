"""Three-stage, per-subtype translation evaluation pipeline.

For every (segment, subtype) pair a record moves through up to three stages:

* subtype evaluation (``SE``): one agent screens the translation for that
  subtype and proposes findings;
* self-reflection (``SR``): the agent corrects the translation, then verifies
  its own findings against the correction; the summed token log-probability
  of the verification reply is the record's confidence;
* collaborative discussion (``CD``): records whose confidence falls below the
  calibrated threshold are escalated to the category expert for an
  alternating two-agent discussion (at most ``max_turns`` statements).

Findings end in exactly one terminal status, ``confirmed`` or ``dropped``,
and a segment scores the negative sum of weights of its confirmed findings.
"""

from __future__ import annotations

import enum
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import Dataset, Segment
from .gateway import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayError,
    confidence,
    fingerprint,
)
from .prompts import (
    DemoExample,
    DiscussionTranscript,
    PromptLibrary,
    render_correction,
    render_subtype_eval,
    render_tier1_turn,
    render_tier2_turn,
    render_verification,
)
from .typology import Severity, Subtype, Typology

__all__ = [
    "FindingParseError",
    "FindingStatus",
    "ErrorFinding",
    "EvalRecord",
    "SegmentResult",
    "PipelineContext",
    "parse_findings",
    "format_findings_block",
    "stage_subtype_evaluation",
    "stage_self_reflection",
    "stage_collaborative_discussion",
    "run_record",
    "evaluate_dataset",
    "score_segment",
    "write_report",
    "write_summary",
    "summarize",
]

STAGE_SE = "SE"
STAGE_SR = "SR"
STAGE_CD = "CD"
STAGE_FINAL = "Final"

VERDICT_CORRECTED = "Error has been corrected."
VERDICT_NO_DIFFERENCE = (
    "No significant difference between the original translation and the corrected Translation."
)


class FindingParseError(ValueError):
    """An agent reply that should contain findings could not be parsed."""


class FindingStatus(enum.Enum):
    PROPOSED = "proposed"
    VALIDATED = "validated"
    DROPPED = "dropped"
    CONFIRMED = "confirmed"

    def __str__(self) -> str:
        return self.value


TERMINAL_STATUSES = (FindingStatus.DROPPED, FindingStatus.CONFIRMED)


@dataclass
class ErrorFinding:
    subtype: str
    severity: Severity
    span_text: str
    explanation: str = ""
    status: FindingStatus = FindingStatus.PROPOSED
    provenance: str = STAGE_SE


@dataclass
class EvalRecord:
    """State of one (segment, subtype) pair as it moves through the stages."""

    system: str
    seg_id: str
    subtype: str
    stage: str = STAGE_SE
    findings: list[ErrorFinding] = field(default_factory=list)
    corrected_translation: str | None = None
    sr_confidence: float | None = None
    transcript: DiscussionTranscript | None = None
    exchange_fingerprints: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    stage_path: list[str] = field(default_factory=lambda: [STAGE_SE])

    def validated_findings(self) -> list[ErrorFinding]:
        return [f for f in self.findings if f.status is FindingStatus.VALIDATED]

    def confirmed_findings(self) -> list[ErrorFinding]:
        return [f for f in self.findings if f.status is FindingStatus.CONFIRMED]


@dataclass
class SegmentResult:
    system: str
    seg_id: str
    records: list[EvalRecord]
    final_findings: list[ErrorFinding]
    score: Fraction


@dataclass
class PipelineContext:
    """Everything the stage functions need besides the segment itself."""

    typology: Typology
    gateway: Gateway
    library: PromptLibrary
    model: str
    lang_pair: str
    demos: tuple[DemoExample, ...] = ()
    threshold: float = float("-inf")
    max_turns: int = 4


# ---------------------------------------------------------------------------
# Parsing agent replies

_TRIPLE_RE = re.compile(
    r"\b(Major|Minor|Neutral)\s*[-–—]\s*"
    r"([^\W\d_][^-–—'‘’“”\"\n]*?)\s*[-–—]\s*"
    r"['‘“\"]([^'’”\"\n]*)['’”\"]",
    re.IGNORECASE,
)

_NO_ERROR_RE = re.compile(
    r"\bno\s+(?:\w+\s+){0,2}errors?\b"
    r"|\berrors?[ -]free\b"
    r"|\bwithout\s+(?:any\s+)?errors?\b"
    r"|\bnot\s+contain\s+(?:any\s+)?errors?\b",
    re.IGNORECASE,
)

_EXPLANATION_LABEL_RE = re.compile(r"^\s*explanation\s*[:：]\s*", re.IGNORECASE)

_TIER1_EXIST_RE = re.compile(r"error\s+exists?\s*[:：]?\s*(yes|no)\b", re.IGNORECASE)
_TIER1_SEVERITY_RE = re.compile(
    r"error\s+severity\s*[:：]?\s*(major|minor|neutral)\b", re.IGNORECASE
)

_V_CORRECTED_RE = re.compile(r"error\s+has\s+been\s+corrected", re.IGNORECASE)
_V_NO_DIFF_RE = re.compile(r"no\s+significant\s+difference", re.IGNORECASE)


def _parse_findings_with_notes(
    text: str, typology: Typology, owner: Subtype | None = None
) -> tuple[list[ErrorFinding], list[str]]:
    matches = list(_TRIPLE_RE.finditer(text))
    if not matches:
        if _NO_ERROR_RE.search(text):
            return [], []
        raise FindingParseError(
            f"reply contains neither findings nor a no-error statement: {text[:120]!r}"
        )
    findings: list[ErrorFinding] = []
    notes: list[str] = []
    for current, nxt in zip(matches, list(matches[1:]) + [None]):
        severity = Severity.parse(current.group(1))
        name = current.group(2).strip()
        span = current.group(3).strip()
        tail = text[current.end() : nxt.start() if nxt else len(text)].strip()
        explanation = _EXPLANATION_LABEL_RE.sub("", tail).strip()
        resolved = typology.resolve_subtype(name)
        if resolved is None and owner is None:
            raise FindingParseError(f"unknown error subtype name {name!r}")
        if owner is not None:
            # Ownership is fixed by the agent topology; a reply naming a
            # different subtype keeps its severity and span but is re-homed.
            if resolved is not None and resolved.id != owner.id:
                notes.append(
                    f"reply named subtype {name!r}; re-homed to owner {owner.id!r}"
                )
            subtype_id = owner.id
        else:
            subtype_id = resolved.id  # type: ignore[union-attr]
        findings.append(
            ErrorFinding(
                subtype=subtype_id,
                severity=severity,
                span_text=span,
                explanation=explanation,
            )
        )
    return findings, notes


def parse_findings(
    text: str, typology: Typology, owner: Subtype | None = None
) -> list[ErrorFinding]:
    """Parse ``Severity-Subtype-'span'`` triples out of an agent reply.

    A reply that declares no error yields the empty list.  Subtype names are
    fuzzy-matched against the typology; with an ``owner`` given, unknown or
    foreign names are coerced to the owning subtype instead of failing.
    """
    findings, _ = _parse_findings_with_notes(text, typology, owner)
    return findings


def format_findings_block(findings: Sequence[ErrorFinding], typology: Typology) -> str:
    lines: list[str] = []
    for f in findings:
        name = typology.subtype_by_id(f.subtype).name
        lines.append(f"{f.severity.value}-{name}-'{f.span_text}'")
        if f.explanation:
            lines.append(f"Explanation: {f.explanation}")
    return "\n".join(lines)


def _parse_verification_verdicts(text: str) -> list[bool] | None:
    """Ordered verdicts from a verification reply; True means corrected."""
    marks = [(m.start(), True) for m in _V_CORRECTED_RE.finditer(text)]
    marks.extend((m.start(), False) for m in _V_NO_DIFF_RE.finditer(text))
    if not marks:
        return None
    return [verdict for _, verdict in sorted(marks)]


def _parse_tier1_verdict(text: str) -> tuple[bool, Severity | None] | None:
    exist_match = _TIER1_EXIST_RE.search(text)
    if exist_match is None:
        return None
    exists = exist_match.group(1).lower() == "yes"
    severity_match = _TIER1_SEVERITY_RE.search(text)
    severity = Severity.parse(severity_match.group(1)) if severity_match else None
    return exists, severity


def _parse_tier2_stance(text: str) -> bool | None:
    """True for agreement, False for disagreement, None on contract breach."""
    lead = text.lstrip(" \t\r\n\"'‘’“”*").lower()
    if lead.startswith("i agree"):
        return True
    if lead.startswith("i disagree"):
        return False
    return None


# ---------------------------------------------------------------------------
# Stage execution

_SE_REMINDER = (
    "Your previous reply did not follow the required format. Report each error "
    "on its own line as Severity-Error Type-'error span', or reply exactly: "
    "No error found."
)
_CORRECTION_REMINDER = "Reply with the corrected translation only."
_VERIFICATION_REMINDER = (
    "Your previous reply did not follow the required format. For each error, "
    f'reply with exactly one of: "{VERDICT_CORRECTED}" or "{VERDICT_NO_DIFFERENCE}"'
)
_TIER1_REMINDER = (
    'Your previous reply did not follow the required format. Begin with the two '
    'lines "Error Exist: Yes" or "Error Exist: No", then '
    '"Error Severity: Major", "Error Severity: Minor", or "Error Severity: Neutral".'
)
_TIER2_REMINDER = (
    'Your previous reply did not follow the required format. You must begin '
    'your response with either "I agree" or "I disagree".'
)


def _complete(ctx: PipelineContext, rec: EvalRecord, messages: Sequence[ChatMessage]) -> ChatResponse:
    request = ChatRequest(
        model=ctx.model,
        messages=tuple(messages),
        temperature=0.0,
        want_logprobs=True,
    )
    rec.exchange_fingerprints.append(fingerprint(request))
    return ctx.gateway.complete(request)


def _with_reminder(
    messages: Sequence[ChatMessage], reply: str, reminder: str
) -> list[ChatMessage]:
    return list(messages) + [
        ChatMessage(role="assistant", content=reply),
        ChatMessage(role="user", content=reminder),
    ]


def _ask_parsed(
    ctx: PipelineContext,
    rec: EvalRecord,
    messages: Sequence[ChatMessage],
    parse: Callable[[str], object | None],
    reminder: str,
):
    """Issue a call, reprompting once if the reply fails to parse.

    Returns (response, parsed) where parsed is None after two failures.
    """
    response = _complete(ctx, rec, messages)
    parsed = parse(response.text)
    if parsed is not None:
        return response, parsed
    retry = _with_reminder(messages, response.text, reminder)
    response = _complete(ctx, rec, retry)
    return response, parse(response.text)


def stage_subtype_evaluation(ctx: PipelineContext, seg: Segment, subtype: Subtype) -> EvalRecord:
    """Run the screening stage and route the record to SR or Final."""
    rec = EvalRecord(system=seg.system, seg_id=seg.seg_id, subtype=subtype.id)
    messages = render_subtype_eval(
        seg.source,
        seg.translation,
        subtype,
        ctx.typology.severity_definition,
        ctx.lang_pair,
        ctx.demos,
        ctx.library,
    )

    notes: list[str] = []

    def parse(text: str):
        nonlocal notes
        try:
            found, notes = _parse_findings_with_notes(text, ctx.typology, owner=subtype)
            return found
        except FindingParseError:
            return None

    _, findings = _ask_parsed(ctx, rec, messages, parse, _SE_REMINDER)
    if findings is None:
        rec.flags.append("subtype evaluation reply unparseable after retry; treated as no error")
        findings = []
    rec.flags.extend(notes)
    rec.findings = list(findings)
    if rec.findings:
        rec.stage = STAGE_SR
    else:
        rec.stage = STAGE_FINAL
    rec.stage_path.append(rec.stage)
    return rec


def stage_self_reflection(ctx: PipelineContext, rec: EvalRecord, seg: Segment) -> EvalRecord:
    """Correct, verify, and either finalize the record or escalate it."""
    if rec.stage != STAGE_SR:
        raise ValueError(f"record is in stage {rec.stage!r}, not {STAGE_SR!r}")
    subtype = ctx.typology.subtype_by_id(rec.subtype)
    block = format_findings_block(rec.findings, ctx.typology)

    corr_messages = render_correction(
        seg.source, seg.translation, subtype, block, ctx.lang_pair, ctx.library
    )
    _, corrected = _ask_parsed(
        ctx, rec, corr_messages, lambda t: t.strip() or None, _CORRECTION_REMINDER
    )
    if corrected is None:
        rec.flags.append("empty correction reply after retry; kept original translation")
        corrected = seg.translation
    rec.corrected_translation = str(corrected)

    ver_messages = render_verification(seg.translation, rec.corrected_translation, block, ctx.library)
    ver_response, verdicts = _ask_parsed(
        ctx, rec, ver_messages, _parse_verification_verdicts, _VERIFICATION_REMINDER
    )
    if verdicts is None:
        rec.flags.append("verification verdict unparseable after retry; findings kept")
        verdicts = [True] * len(rec.findings)
    verdicts = list(verdicts)
    if len(verdicts) == 1 and len(rec.findings) > 1:
        verdicts = verdicts * len(rec.findings)
    elif len(verdicts) != len(rec.findings):
        rec.flags.append(
            f"verification returned {len(verdicts)} verdicts for {len(rec.findings)} findings"
        )
        while len(verdicts) < len(rec.findings):
            verdicts.append(verdicts[-1])
        verdicts = verdicts[: len(rec.findings)]

    for finding, kept in zip(rec.findings, verdicts):
        finding.status = FindingStatus.VALIDATED if kept else FindingStatus.DROPPED
        finding.provenance = STAGE_SR

    try:
        rec.sr_confidence = confidence(ver_response)
    except GatewayError:
        rec.sr_confidence = None
        rec.flags.append("verification reply carried no log-probabilities")
    routing_confidence = rec.sr_confidence if rec.sr_confidence is not None else float("-inf")

    validated = rec.validated_findings()
    if not validated:
        rec.stage = STAGE_FINAL
    elif routing_confidence >= ctx.threshold:
        for finding in validated:
            finding.status = FindingStatus.CONFIRMED
        rec.stage = STAGE_FINAL
    else:
        rec.stage = STAGE_CD
    rec.stage_path.append(rec.stage)
    return rec


def stage_collaborative_discussion(
    ctx: PipelineContext, rec: EvalRecord, seg: Segment
) -> EvalRecord:
    """Alternating tier-1/tier-2 discussion; the last tier-1 verdict rules."""
    if rec.stage != STAGE_CD:
        raise ValueError(f"record is in stage {rec.stage!r}, not {STAGE_CD!r}")
    subtype = ctx.typology.subtype_by_id(rec.subtype)
    core = ctx.typology.core_of(rec.subtype)
    core_subtypes = ctx.typology.subtypes_of(core.id)
    active = rec.validated_findings()
    if not active:
        raise ValueError("discussion stage requires at least one validated finding")

    info = format_findings_block(active, ctx.typology)
    if rec.corrected_translation is not None:
        info = f"{info}\nCorrected translation: {rec.corrected_translation}"
    transcript = DiscussionTranscript(max_turns=ctx.max_turns)
    rec.transcript = transcript

    verdict: tuple[bool, Severity | None] | None = None
    verdict_seen = False
    while len(transcript) < ctx.max_turns:
        tier1_messages = render_tier1_turn(
            seg.source, seg.translation, core, core_subtypes, info, transcript, ctx.library
        )
        tier1_response, parsed = _ask_parsed(
            ctx, rec, tier1_messages, _parse_tier1_verdict, _TIER1_REMINDER
        )
        transcript.append("tier1", tier1_response.text)
        if parsed is None:
            rec.flags.append("tier-1 verdict unparseable after retry")
        else:
            verdict = parsed
            verdict_seen = True
        if len(transcript) >= ctx.max_turns:
            break

        tier2_messages = render_tier2_turn(
            seg.source, seg.translation, subtype, info, transcript, ctx.library
        )
        tier2_response, stance = _ask_parsed(
            ctx, rec, tier2_messages, _parse_tier2_stance, _TIER2_REMINDER
        )
        transcript.append("tier2", tier2_response.text)
        if stance is None:
            rec.flags.append("tier-2 reply broke the agree/disagree contract; treated as disagreement")
            stance = False
        if stance:
            break

    if not verdict_seen:
        rec.flags.append("no usable tier-1 verdict; findings confirmed at prior severity")
        for finding in active:
            finding.status = FindingStatus.CONFIRMED
            finding.provenance = STAGE_CD
    else:
        exists, severity = verdict  # type: ignore[misc]
        if not exists:
            for finding in active:
                finding.status = FindingStatus.DROPPED
                finding.provenance = STAGE_CD
        else:
            if severity is None:
                rec.flags.append("tier-1 verdict lacked a severity; prior severity kept")
            for finding in active:
                finding.status = FindingStatus.CONFIRMED
                finding.provenance = STAGE_CD
                if severity is not None:
                    finding.severity = severity

    rec.stage = STAGE_FINAL
    rec.stage_path.append(STAGE_FINAL)
    return rec


def run_record(ctx: PipelineContext, seg: Segment, subtype: Subtype) -> EvalRecord:
    rec = stage_subtype_evaluation(ctx, seg, subtype)
    if rec.stage == STAGE_SR:
        stage_self_reflection(ctx, rec, seg)
    if rec.stage == STAGE_CD:
        stage_collaborative_discussion(ctx, rec, seg)
    return rec


def _run_record_safe(ctx: PipelineContext, seg: Segment, subtype: Subtype) -> EvalRecord:
    try:
        return run_record(ctx, seg, subtype)
    except Exception as exc:
        rec = EvalRecord(system=seg.system, seg_id=seg.seg_id, subtype=subtype.id)
        rec.stage = STAGE_FINAL
        rec.stage_path = [STAGE_SE, STAGE_FINAL]
        rec.flags.append(f"record failed: {exc}")
        return rec


def _score_records(records: Sequence[EvalRecord], typology: Typology) -> Fraction:
    total = Fraction(0)
    for rec in records:
        if rec.stage != STAGE_FINAL:
            raise ValueError(
                f"cannot score: record ({rec.system}, {rec.seg_id}, {rec.subtype}) "
                f"is still in stage {rec.stage}"
            )
        for finding in rec.confirmed_findings():
            total += typology.weight_of(finding.subtype, finding.severity)
    return -total


def score_segment(result: SegmentResult, typology: Typology) -> Fraction:
    """Negative weighted sum over the segment's confirmed findings."""
    return _score_records(result.records, typology)


def _assemble(records: Sequence[EvalRecord], typology: Typology) -> list[SegmentResult]:
    grouped: dict[tuple[str, str], list[EvalRecord]] = {}
    for rec in records:
        grouped.setdefault((rec.system, rec.seg_id), []).append(rec)
    results = []
    for (system, seg_id) in sorted(grouped):
        recs = sorted(grouped[(system, seg_id)], key=lambda r: r.subtype)
        final = [f for r in recs for f in r.confirmed_findings()]
        results.append(
            SegmentResult(
                system=system,
                seg_id=seg_id,
                records=recs,
                final_findings=final,
                score=_score_records(recs, typology),
            )
        )
    return results


def evaluate_dataset(
    dataset: Dataset,
    ctx: PipelineContext,
    *,
    max_workers: int = 8,
    subtypes: Sequence[Subtype] | None = None,
) -> list[SegmentResult]:
    """Fan the pipeline out over every (segment, subtype) pair.

    Per-record failures are converted into flagged, finding-free records so
    one bad exchange cannot abort a long run.  Results are merged in sorted
    (system, seg_id, subtype) order regardless of completion order.
    """
    chosen = tuple(subtypes if subtypes is not None else ctx.typology.subtypes)
    pairs = [(seg, sub) for seg in dataset.segments for sub in chosen]
    if not pairs:
        return []
    workers = max(1, min(max_workers, len(pairs)))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        records = list(executor.map(lambda p: _run_record_safe(ctx, *p), pairs))
    return _assemble(records, ctx.typology)


# ---------------------------------------------------------------------------
# Reports

def _finding_doc(finding: ErrorFinding) -> dict:
    return {
        "subtype": finding.subtype,
        "severity": finding.severity.value,
        "span": finding.span_text,
        "status": finding.status.value,
        "provenance": finding.provenance,
    }


def _result_doc(result: SegmentResult) -> dict:
    return {
        "system": result.system,
        "seg_id": result.seg_id,
        "score": float(result.score),
        "findings": [
            _finding_doc(f) for rec in result.records for f in rec.findings
        ],
        "records": [
            {
                "subtype": rec.subtype,
                "stage_path": list(rec.stage_path),
                "sr_confidence": rec.sr_confidence,
                "exchange_fingerprints": list(rec.exchange_fingerprints),
                "flags": list(rec.flags),
            }
            for rec in result.records
        ],
    }


def _dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_report(results: Sequence[SegmentResult], path: str | Path) -> None:
    """One JSON object per segment, sorted, stable byte-for-byte."""
    ordered = sorted(results, key=lambda r: (r.system, r.seg_id))
    lines = [_dumps(_result_doc(r)) for r in ordered]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def flagged_record_count(results: Sequence[SegmentResult]) -> int:
    return sum(1 for r in results for rec in r.records if rec.flags)


def summarize(results: Sequence[SegmentResult]) -> dict:
    systems: dict[str, dict] = {}
    for result in sorted(results, key=lambda r: (r.system, r.seg_id)):
        entry = systems.setdefault(result.system, {"segments": 0, "total_score": Fraction(0)})
        entry["segments"] += 1
        entry["total_score"] += result.score
    return {
        "segments": len(results),
        "records": sum(len(r.records) for r in results),
        "flagged_records": flagged_record_count(results),
        "confirmed_findings": sum(len(r.final_findings) for r in results),
        "systems": {
            name: {
                "segments": entry["segments"],
                "total_score": float(entry["total_score"]),
                "mean_score": float(entry["total_score"] / entry["segments"]),
            }
            for name, entry in systems.items()
        },
    }


def write_summary(
    results: Sequence[SegmentResult], path: str | Path, run_meta: dict | None = None
) -> None:
    doc = summarize(results)
    if run_meta:
        doc["run"] = run_meta
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )
