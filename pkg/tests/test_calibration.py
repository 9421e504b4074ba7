"""Nearest-rank percentile, threshold calibration, and the threshold store."""

import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mqmeval.calibration import (
    CalibrationError,
    ThresholdEntry,
    ThresholdStore,
    calibrate_threshold,
    entry_for,
    percentile_nearest_rank,
)
from mqmeval.corpus import Dataset

from conftest import (
    CORRECTION_MARKER,
    SE_MARKER,
    VERIFICATION_MARKER,
    make_ctx,
    make_segment,
)


def test_percentile_frozen_examples():
    assert percentile_nearest_rank([-5, -4, -3, -2, -1], 0.6) == -3
    assert percentile_nearest_rank([1, 2, 3, 4], 0.5) == 2
    assert percentile_nearest_rank([7], 0.6) == 7
    assert percentile_nearest_rank([3, 1, 2], 1.0) == 3
    # Decimal intent: 0.2 of five values is rank 1, not rank 2.
    assert percentile_nearest_rank([10, 20, 30, 40, 50], 0.2) == 10


def test_percentile_rejects_bad_inputs():
    with pytest.raises(CalibrationError):
        percentile_nearest_rank([], 0.5)
    with pytest.raises(CalibrationError):
        percentile_nearest_rank([1.0], 0.0)
    with pytest.raises(CalibrationError):
        percentile_nearest_rank([1.0], 1.5)


@given(
    st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=30),
    st.integers(min_value=1, max_value=10),
)
def test_percentile_matches_bruteforce(values, tenths):
    p = tenths / 10
    expected = sorted(values)[math.ceil(Fraction(tenths, 10) * len(values)) - 1]
    assert percentile_nearest_rank(values, p) == expected


@given(
    st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=30),
    st.integers(min_value=1, max_value=10),
)
def test_percentile_is_a_pool_member(values, tenths):
    result = percentile_nearest_rank(values, tenths / 10)
    assert result in [float(v) for v in values]


TWIST_DESCRIPTION = "Target text states something other than the source."


def _validation_entries() -> list[dict]:
    """Two-segment validation script; only the twist agent reports errors."""
    return [
        {
            "match": {"prompt_substring": [SE_MARKER, TWIST_DESCRIPTION, "first source"]},
            "text": "Major-Twist-'first target'",
        },
        {
            "match": {"prompt_substring": [SE_MARKER, TWIST_DESCRIPTION, "second source"]},
            "text": "Minor-Twist-'second target'",
        },
        {"match": {"prompt_substring": SE_MARKER}, "text": "No error found."},
        {"match": {"prompt_substring": CORRECTION_MARKER}, "text": "a repaired target"},
        {
            "match": {"prompt_substring": [VERIFICATION_MARKER, "first target"]},
            "text": "Error has been corrected.",
            "logprobs": [-1.0, -1.0],
        },
        {
            "match": {"prompt_substring": [VERIFICATION_MARKER, "second target"]},
            "text": "Error has been corrected.",
            "logprobs": [-0.25],
        },
    ]


def _validation_dataset() -> Dataset:
    return Dataset(
        name="val",
        segments=[
            make_segment(seg_id="1", source="first source", translation="first target"),
            make_segment(seg_id="2", source="second source", translation="second target"),
        ],
    )


def test_calibrate_threshold_collects_sr_confidences(mini_typology):
    ctx = make_ctx(_validation_entries(), mini_typology, threshold=123.0)
    result = calibrate_threshold(_validation_dataset(), ctx, percentile=0.6)
    # Pool is {-2.0, -0.25}; rank ceil(0.6 * 2) = 2 -> -0.25.
    assert result.pool == (-2.0, -0.25)
    assert result.threshold == -0.25
    assert result.pool_size == 2
    # A second run over the same script is identical.
    again = calibrate_threshold(_validation_dataset(), ctx, percentile=0.6)
    assert again == result


def test_calibrate_threshold_ignores_missing_logprobs(mini_typology):
    entries = _validation_entries()
    for entry in entries:
        entry.pop("logprobs", None)
    ctx = make_ctx(entries, mini_typology)
    with pytest.raises(CalibrationError):
        calibrate_threshold(_validation_dataset(), ctx)


def test_calibrate_threshold_empty_dataset(mini_typology):
    ctx = make_ctx([], mini_typology)
    with pytest.raises(CalibrationError):
        calibrate_threshold(Dataset(name="empty"), ctx)


def test_store_roundtrip(tmp_path):
    entry = ThresholdEntry(
        model="m",
        lang_pair="zh-en",
        threshold=-2.5,
        percentile=0.6,
        pool_size=40,
        validation_digest="abc123",
    )
    store = ThresholdStore()
    store.put(entry)
    path = tmp_path / "thresholds.json"
    store.save(path)
    back = ThresholdStore.load(path)
    assert len(back) == 1
    assert back.get("m", "zh-en") == entry
    assert back.get("m", "en-de") is None


def test_store_load_missing_file_is_empty(tmp_path):
    store = ThresholdStore.load(tmp_path / "absent.json")
    assert len(store) == 0


def test_store_load_rejects_malformed(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{}", encoding="utf-8")
    with pytest.raises(CalibrationError):
        ThresholdStore.load(path)


def test_entry_for_binds_dataset_digest(mini_typology):
    from mqmeval.corpus import dataset_digest
    from mqmeval.calibration import CalibrationResult

    dataset = _validation_dataset()
    result = CalibrationResult(threshold=-1.0, percentile=0.6, pool=(-2.0, -1.0, -0.5))
    entry = entry_for(result, "m", "zh-en", dataset)
    assert entry.threshold == -1.0
    assert entry.pool_size == 3
    assert entry.validation_digest == dataset_digest(dataset)
    assert entry.ordering == "ascending-nearest-rank"
