"""Three-stage pipeline: reply parsing, stage routing, scoring, reports."""

from fractions import Fraction

import pytest

from mqmeval.corpus import load_dataset
from mqmeval.orchestrator import (
    STAGE_CD,
    STAGE_FINAL,
    STAGE_SE,
    STAGE_SR,
    ErrorFinding,
    EvalRecord,
    FindingParseError,
    FindingStatus,
    SegmentResult,
    _parse_tier1_verdict,
    _parse_tier2_stance,
    _parse_verification_verdicts,
    evaluate_dataset,
    format_findings_block,
    parse_findings,
    run_record,
    score_segment,
    stage_collaborative_discussion,
    stage_self_reflection,
    stage_subtype_evaluation,
    summarize,
    write_report,
)
from mqmeval.typology import Severity, default_typology

from conftest import (
    CORRECTION_MARKER,
    SE_MARKER,
    TIER1_MARKER,
    TIER2_MARKER,
    VERIFICATION_MARKER,
    make_ctx,
    make_segment,
)

TYPOLOGY = default_typology()


# ---------------------------------------------------------------------------
# Reply parsing


def test_parse_findings_block_with_explanations():
    text = (
        "Major-Mistranslation-'know about it'\n"
        "Explanation: the meaning shifts.\n"
        "Minor-Awkward-'the whole sentence'\n"
    )
    found = parse_findings(text, TYPOLOGY)
    assert [(f.subtype, f.severity, f.span_text) for f in found] == [
        ("mistranslation", Severity.MAJOR, "know about it"),
        ("awkward", Severity.MINOR, "the whole sentence"),
    ]
    assert found[0].explanation == "the meaning shifts."
    assert found[1].explanation == ""
    assert all(f.status is FindingStatus.PROPOSED for f in found)


def test_parse_findings_tolerates_unicode_punctuation():
    text = "Minor–Awkward–‘stärker gemacht’"
    found = parse_findings(text, TYPOLOGY)
    assert [(f.subtype, f.span_text) for f in found] == [("awkward", "stärker gemacht")]
    text = "major - mistranslation - \"the late stage\""
    found = parse_findings(text, TYPOLOGY)
    assert found[0].severity is Severity.MAJOR


def test_parse_findings_no_error_phrasings():
    for text in (
        "No error found.",
        "There are no errors in this translation.",
        "The translation is error-free.",
        "This translation is without errors.",
        "The target does not contain any errors.",
    ):
        assert parse_findings(text, TYPOLOGY) == []


def test_parse_findings_owner_coercion():
    owner = TYPOLOGY.subtype_by_id("awkward")
    found = parse_findings("Major-Mistranslation-'x'", TYPOLOGY, owner=owner)
    assert found[0].subtype == "awkward"
    assert found[0].severity is Severity.MAJOR
    # Without an owner an unknown name is an error.
    with pytest.raises(FindingParseError):
        parse_findings("Major-Blorbulation-'x'", TYPOLOGY)
    # With an owner even an unknown name is coerced.
    found = parse_findings("Major-Blorbulation-'x'", TYPOLOGY, owner=owner)
    assert found[0].subtype == "awkward"


def test_parse_findings_garbage_raises():
    with pytest.raises(FindingParseError):
        parse_findings("I could not decide anything.", TYPOLOGY)


def test_format_findings_block_roundtrip():
    findings = [
        ErrorFinding(subtype="mistranslation", severity=Severity.MAJOR, span_text="a b"),
        ErrorFinding(
            subtype="punctuation",
            severity=Severity.MINOR,
            span_text="x, y",
            explanation="comma splice",
        ),
    ]
    block = format_findings_block(findings, TYPOLOGY)
    assert "Major-Mistranslation-'a b'" in block
    assert "Explanation: comma splice" in block
    back = parse_findings(block, TYPOLOGY)
    assert [(f.subtype, f.severity, f.span_text) for f in back] == [
        (f.subtype, f.severity, f.span_text) for f in findings
    ]


def test_parse_verification_verdicts():
    assert _parse_verification_verdicts("Error has been corrected.") == [True]
    assert _parse_verification_verdicts(
        "No significant difference between the original translation and the "
        "corrected Translation."
    ) == [False]
    both = _parse_verification_verdicts(
        "No significant difference here. Later: error has been corrected."
    )
    assert both == [False, True]
    assert _parse_verification_verdicts("The texts look different.") is None


def test_parse_tier1_verdict():
    assert _parse_tier1_verdict("Error Exist: Yes. Error Severity: Major.") == (
        True,
        Severity.MAJOR,
    )
    assert _parse_tier1_verdict("error exists: no") == (False, None)
    assert _parse_tier1_verdict("Error Exist: Yes.") == (True, None)
    assert _parse_tier1_verdict("nothing structured") is None


def test_parse_tier2_stance():
    assert _parse_tier2_stance("I agree with him.") is True
    assert _parse_tier2_stance('"I disagree" because the span is fine.') is False
    assert _parse_tier2_stance("  “I agree”, as stated.") is True
    assert _parse_tier2_stance("Maybe.") is None


# ---------------------------------------------------------------------------
# Stage routing against scripted replies

SEG = make_segment(source="源文本很短", translation="the target text")


def _se_entry(text: str, **kw) -> dict:
    return {"match": {"prompt_substring": SE_MARKER}, "text": text, **kw}


def test_se_clean_record_finishes(mini_typology):
    ctx = make_ctx([_se_entry("No error found.")], mini_typology)
    rec = stage_subtype_evaluation(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.stage == STAGE_FINAL
    assert rec.stage_path == [STAGE_SE, STAGE_FINAL]
    assert rec.findings == [] and rec.flags == []
    assert len(rec.exchange_fingerprints) == 1


def test_se_findings_route_to_reflection(mini_typology):
    ctx = make_ctx([_se_entry("Major-Twist-'the target'")], mini_typology)
    rec = stage_subtype_evaluation(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.stage == STAGE_SR
    assert [f.status for f in rec.findings] == [FindingStatus.PROPOSED]


def test_se_reprompt_recovers(mini_typology):
    entries = [
        _se_entry("cannot say", once=True),
        _se_entry("Minor-Twist-'the target'"),
    ]
    ctx = make_ctx(entries, mini_typology)
    rec = stage_subtype_evaluation(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.stage == STAGE_SR
    assert rec.flags == []
    assert len(rec.exchange_fingerprints) == 2


def test_se_unparseable_after_retry_is_flagged(mini_typology):
    ctx = make_ctx([_se_entry("cannot say")], mini_typology)
    rec = stage_subtype_evaluation(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.stage == STAGE_FINAL
    assert rec.findings == []
    assert any("unparseable" in f for f in rec.flags)
    assert len(rec.exchange_fingerprints) == 2


def test_se_foreign_name_rehomed_and_noted(mini_typology):
    ctx = make_ctx([_se_entry("Major-Gap-'the target'")], mini_typology)
    rec = stage_subtype_evaluation(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.findings[0].subtype == "twist"
    assert any("re-homed" in f for f in rec.flags)


def _sr_entries(verification_text: str, logprobs=None, correction="a fixed target") -> list[dict]:
    ver: dict = {"match": {"prompt_substring": VERIFICATION_MARKER}, "text": verification_text}
    if logprobs is not None:
        ver["logprobs"] = logprobs
    return [
        {"match": {"prompt_substring": CORRECTION_MARKER}, "text": correction},
        ver,
    ]


def _record_in_sr(ctx, mini_typology):
    rec = stage_subtype_evaluation(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.stage == STAGE_SR
    return rec


def test_sr_confident_validation_bypasses_discussion(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "Error has been corrected.", logprobs=[-0.25, -0.25]
    )
    ctx = make_ctx(entries, mini_typology, threshold=-1.0)
    rec = _record_in_sr(ctx, mini_typology)
    rec = stage_self_reflection(ctx, rec, SEG)
    assert rec.stage == STAGE_FINAL
    assert rec.stage_path == [STAGE_SE, STAGE_SR, STAGE_FINAL]
    assert rec.sr_confidence == -0.5
    assert [f.status for f in rec.findings] == [FindingStatus.CONFIRMED]
    assert rec.findings[0].provenance == STAGE_SR
    assert rec.corrected_translation == "a fixed target"


def test_sr_no_difference_drops_finding(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "No significant difference between the original translation and the "
        "corrected Translation.",
        logprobs=[-0.1],
    )
    ctx = make_ctx(entries, mini_typology, threshold=-1.0)
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert rec.stage == STAGE_FINAL
    assert [f.status for f in rec.findings] == [FindingStatus.DROPPED]
    assert rec.findings[0].provenance == STAGE_SR


def test_sr_low_confidence_escalates(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "Error has been corrected.", logprobs=[-3.0, -3.0]
    )
    ctx = make_ctx(entries, mini_typology, threshold=-1.0)
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert rec.stage == STAGE_CD
    assert rec.sr_confidence == -6.0
    assert [f.status for f in rec.findings] == [FindingStatus.VALIDATED]


def test_sr_missing_logprobs_flags_and_escalates(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "Error has been corrected."
    )
    ctx = make_ctx(entries, mini_typology, threshold=-1.0)
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert rec.sr_confidence is None
    assert any("log-prob" in f for f in rec.flags)
    assert rec.stage == STAGE_CD


def test_sr_missing_logprobs_still_finalizes_at_minus_inf_threshold(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "Error has been corrected."
    )
    ctx = make_ctx(entries, mini_typology, threshold=float("-inf"))
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert rec.stage == STAGE_FINAL
    assert [f.status for f in rec.findings] == [FindingStatus.CONFIRMED]


def test_sr_single_verdict_broadcasts(mini_typology):
    entries = [
        _se_entry("Major-Twist-'the target'\nMinor-Twist-'text'")
    ] + _sr_entries(
        "No significant difference between the original translation and the "
        "corrected Translation.",
        logprobs=[-0.1],
    )
    ctx = make_ctx(entries, mini_typology, threshold=-1.0)
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert [f.status for f in rec.findings] == [FindingStatus.DROPPED] * 2
    assert rec.flags == []


def test_sr_verdict_count_mismatch_flags_and_pads(mini_typology):
    entries = [
        _se_entry("Major-Twist-'the target'\nMinor-Twist-'text'\nMinor-Twist-'the'")
    ] + _sr_entries(
        "Error has been corrected. No significant difference overall.",
        logprobs=[-0.1],
    )
    ctx = make_ctx(entries, mini_typology, threshold=float("-inf"))
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert any("verdicts for" in f for f in rec.flags)
    # Last verdict (False) pads the third finding.
    assert [f.status for f in rec.findings] == [
        FindingStatus.CONFIRMED,
        FindingStatus.DROPPED,
        FindingStatus.DROPPED,
    ]


def test_sr_unparseable_verification_keeps_findings(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "They look pretty similar to me."
    )
    ctx = make_ctx(entries, mini_typology, threshold=float("-inf"))
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert any("verification verdict unparseable" in f for f in rec.flags)
    assert [f.status for f in rec.findings] == [FindingStatus.CONFIRMED]


def test_sr_empty_correction_keeps_original(mini_typology):
    entries = [_se_entry("Major-Twist-'the target'")] + _sr_entries(
        "Error has been corrected.", logprobs=[-0.1], correction=""
    )
    ctx = make_ctx(entries, mini_typology, threshold=float("-inf"))
    rec = stage_self_reflection(ctx, _record_in_sr(ctx, mini_typology), SEG)
    assert any("empty correction" in f for f in rec.flags)
    assert rec.corrected_translation == SEG.translation


def _cd_ctx(mini_typology, tier_entries, max_turns=4):
    entries = (
        [_se_entry("Major-Twist-'the target'")]
        + _sr_entries("Error has been corrected.", logprobs=[-5.0])
        + tier_entries
    )
    return make_ctx(entries, mini_typology, threshold=float("inf"), max_turns=max_turns)


def _record_in_cd(ctx, mini_typology):
    rec = _record_in_sr(ctx, mini_typology)
    rec = stage_self_reflection(ctx, rec, SEG)
    assert rec.stage == STAGE_CD
    return rec


def test_cd_quick_agreement_confirms_with_downgrade(mini_typology):
    tier_entries = [
        {
            "match": {"prompt_substring": TIER1_MARKER},
            "text": "Error Exist: Yes. Error Severity: Minor.",
        },
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "I agree."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries)
    rec = stage_collaborative_discussion(ctx, _record_in_cd(ctx, mini_typology), SEG)
    assert rec.stage == STAGE_FINAL
    assert rec.stage_path == [STAGE_SE, STAGE_SR, STAGE_CD, STAGE_FINAL]
    assert [f.status for f in rec.findings] == [FindingStatus.CONFIRMED]
    assert rec.findings[0].severity is Severity.MINOR
    assert rec.findings[0].provenance == STAGE_CD
    assert len(rec.transcript) == 2


def test_cd_agreement_on_no_error_drops(mini_typology):
    tier_entries = [
        {
            "match": {"prompt_substring": TIER1_MARKER},
            "text": "Error Exist: No. Error Severity: Neutral.",
        },
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "I agree with that."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries)
    rec = stage_collaborative_discussion(ctx, _record_in_cd(ctx, mini_typology), SEG)
    assert [f.status for f in rec.findings] == [FindingStatus.DROPPED]
    assert rec.findings[0].provenance == STAGE_CD


def test_cd_disagreement_runs_to_turn_limit_and_last_verdict_rules(mini_typology):
    tier_entries = [
        {
            "match": {"prompt_substring": TIER1_MARKER},
            "text": "Error Exist: Yes. Error Severity: Major.",
            "once": True,
        },
        {
            "match": {"prompt_substring": TIER1_MARKER},
            "text": "Error Exist: Yes. Error Severity: Minor.",
        },
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "I disagree entirely."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries, max_turns=4)
    rec = stage_collaborative_discussion(ctx, _record_in_cd(ctx, mini_typology), SEG)
    assert len(rec.transcript) == 4
    assert rec.findings[0].status is FindingStatus.CONFIRMED
    assert rec.findings[0].severity is Severity.MINOR


def test_cd_tier2_contract_breach_counts_as_disagreement(mini_typology):
    tier_entries = [
        {
            "match": {"prompt_substring": TIER1_MARKER},
            "text": "Error Exist: Yes. Error Severity: Major.",
        },
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "Well, it depends."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries, max_turns=2)
    rec = stage_collaborative_discussion(ctx, _record_in_cd(ctx, mini_typology), SEG)
    assert any("agree/disagree contract" in f for f in rec.flags)
    assert rec.findings[0].status is FindingStatus.CONFIRMED
    assert rec.findings[0].severity is Severity.MAJOR


def test_cd_without_any_tier1_verdict_confirms_prior(mini_typology):
    tier_entries = [
        {"match": {"prompt_substring": TIER1_MARKER}, "text": "hard to tell"},
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "I agree."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries, max_turns=2)
    rec = stage_collaborative_discussion(ctx, _record_in_cd(ctx, mini_typology), SEG)
    assert any("tier-1 verdict unparseable" in f for f in rec.flags)
    assert any("no usable tier-1 verdict" in f for f in rec.flags)
    assert rec.findings[0].status is FindingStatus.CONFIRMED
    assert rec.findings[0].severity is Severity.MAJOR


def test_cd_missing_severity_keeps_prior(mini_typology):
    tier_entries = [
        {"match": {"prompt_substring": TIER1_MARKER}, "text": "Error Exist: Yes."},
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "I agree."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries)
    rec = stage_collaborative_discussion(ctx, _record_in_cd(ctx, mini_typology), SEG)
    assert any("lacked a severity" in f for f in rec.flags)
    assert rec.findings[0].severity is Severity.MAJOR
    assert rec.findings[0].status is FindingStatus.CONFIRMED


def test_cd_requires_validated_findings(mini_typology):
    ctx = make_ctx([], mini_typology)
    rec = EvalRecord(system="s", seg_id="1", subtype="twist", stage=STAGE_CD)
    with pytest.raises(ValueError):
        stage_collaborative_discussion(ctx, rec, SEG)


def test_stage_order_enforced(mini_typology):
    ctx = make_ctx([], mini_typology)
    rec = EvalRecord(system="s", seg_id="1", subtype="twist", stage=STAGE_SE)
    with pytest.raises(ValueError):
        stage_self_reflection(ctx, rec, SEG)
    with pytest.raises(ValueError):
        stage_collaborative_discussion(ctx, rec, SEG)


def test_run_record_full_path(mini_typology):
    tier_entries = [
        {
            "match": {"prompt_substring": TIER1_MARKER},
            "text": "Error Exist: Yes. Error Severity: Minor.",
        },
        {"match": {"prompt_substring": TIER2_MARKER}, "text": "I agree."},
    ]
    ctx = _cd_ctx(mini_typology, tier_entries)
    rec = run_record(ctx, SEG, mini_typology.subtype_by_id("twist"))
    assert rec.stage == STAGE_FINAL
    assert rec.stage_path == [STAGE_SE, STAGE_SR, STAGE_CD, STAGE_FINAL]
    assert [f.status for f in rec.findings] == [FindingStatus.CONFIRMED]


# ---------------------------------------------------------------------------
# Scoring and reports


def _final_record(subtype: str, findings) -> EvalRecord:
    rec = EvalRecord(system="sysA", seg_id="1", subtype=subtype, stage=STAGE_FINAL)
    rec.findings = findings
    return rec


def test_score_segment_sums_confirmed_weights():
    records = [
        _final_record(
            "mistranslation",
            [
                ErrorFinding(
                    subtype="mistranslation",
                    severity=Severity.MAJOR,
                    span_text="x",
                    status=FindingStatus.CONFIRMED,
                )
            ],
        ),
        _final_record(
            "punctuation",
            [
                ErrorFinding(
                    subtype="punctuation",
                    severity=Severity.MINOR,
                    span_text=",",
                    status=FindingStatus.CONFIRMED,
                ),
                ErrorFinding(
                    subtype="punctuation",
                    severity=Severity.MAJOR,
                    span_text=";",
                    status=FindingStatus.DROPPED,
                ),
            ],
        ),
    ]
    result = SegmentResult(
        system="sysA", seg_id="1", records=records, final_findings=[], score=Fraction(0)
    )
    assert score_segment(result, TYPOLOGY) == Fraction(-51, 10)


def test_score_requires_final_records():
    rec = EvalRecord(system="sysA", seg_id="1", subtype="twist", stage=STAGE_SR)
    result = SegmentResult(
        system="sysA", seg_id="1", records=[rec], final_findings=[], score=Fraction(0)
    )
    with pytest.raises(ValueError):
        score_segment(result, default_typology())


def test_evaluate_dataset_golden_case(golden_dir, tmp_path):
    from mqmeval.gateway import MockBackend, Gateway
    from mqmeval.orchestrator import PipelineContext
    from mqmeval.prompts import PromptLibrary, bundled_demos

    case = golden_dir / "case1"
    dataset = load_dataset(case / "segments.tsv", case / "annotations.tsv")
    ctx = PipelineContext(
        typology=TYPOLOGY,
        gateway=Gateway(MockBackend.from_file(case / "transcript.yaml")),
        library=PromptLibrary.bundled(),
        model="demo-model",
        lang_pair="zh-en",
        demos=tuple(bundled_demos()),
        threshold=-2.0,
    )
    results = evaluate_dataset(dataset, ctx, max_workers=4)
    assert len(results) == 1
    result = results[0]
    assert result.score == Fraction(-5)
    assert len(result.records) == 19
    assert [r.subtype for r in result.records] == sorted(r.subtype for r in result.records)
    confirmed = [f for f in result.final_findings if f.status is FindingStatus.CONFIRMED]
    assert [(f.subtype, f.severity) for f in confirmed] == [
        ("mistranslation", Severity.MAJOR)
    ]

    out1, out2 = tmp_path / "r1.jsonl", tmp_path / "r2.jsonl"
    write_report(results, out1)
    write_report(evaluate_dataset(dataset, ctx, max_workers=4), out2)
    assert out1.read_bytes() == out2.read_bytes()

    doc = summarize(results)
    assert doc["segments"] == 1
    assert doc["records"] == 19
    assert doc["flagged_records"] == 0
    assert doc["confirmed_findings"] == 1
    assert doc["systems"]["sysA"]["total_score"] == -5.0


def test_failed_record_is_contained(mini_typology):
    # An empty transcript makes every request fail; the record is flagged
    # while the run as a whole still completes.
    from mqmeval.corpus import Dataset

    ctx = make_ctx([], mini_typology)
    dataset = Dataset(name="t", segments=[SEG])
    results = evaluate_dataset(
        dataset, ctx, max_workers=2, subtypes=(mini_typology.subtype_by_id("twist"),)
    )
    assert len(results) == 1
    rec = results[0].records[0]
    assert rec.stage == STAGE_FINAL
    assert any("record failed" in f for f in rec.flags)
