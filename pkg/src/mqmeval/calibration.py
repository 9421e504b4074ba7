"""Stage-transition threshold calibration.

The escalation threshold that routes low-confidence records into the
discussion stage is a nearest-rank percentile of self-reflection confidences
collected on a validation set (evaluation and self-reflection only, no
discussion).  Calibrated values are persisted per (model, language pair) in a
small JSON store together with their provenance.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .corpus import Dataset, dataset_digest
from .orchestrator import (
    STAGE_SR,
    PipelineContext,
    stage_self_reflection,
    stage_subtype_evaluation,
)

__all__ = [
    "CalibrationError",
    "percentile_nearest_rank",
    "CalibrationResult",
    "calibrate_threshold",
    "ThresholdEntry",
    "ThresholdStore",
]

ORDERING = "ascending-nearest-rank"


class CalibrationError(ValueError):
    """Raised when calibration inputs are unusable."""


def percentile_nearest_rank(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the value at rank ceil(p*n), ascending.

    ``p`` is interpreted by its decimal form, so 0.2 over five values picks
    rank 1 even though the binary float 0.2 is slightly above one fifth.
    """
    if not values:
        raise CalibrationError("percentile of an empty pool is undefined")
    if not 0 < p <= 1:
        raise CalibrationError(f"percentile must lie in (0, 1], got {p}")
    pool = sorted(float(v) for v in values)
    rank = math.ceil(Fraction(str(p)) * len(pool))
    return pool[rank - 1]


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    percentile: float
    pool: tuple[float, ...]

    @property
    def pool_size(self) -> int:
        return len(self.pool)


def calibrate_threshold(
    dataset: Dataset,
    ctx: PipelineContext,
    percentile: float = 0.6,
    *,
    max_workers: int = 8,
) -> CalibrationResult:
    """Collect self-reflection confidences on a validation set and pick the
    nearest-rank percentile.

    Only the first two stages run; the threshold in ``ctx`` is ignored and no
    record is escalated to discussion.  Records whose verification reply
    carried no log-probabilities contribute nothing to the pool.
    """
    # -inf routing means SR always finalizes, so discussion never enters.
    local = replace(ctx, threshold=float("-inf"))

    def one(pair) -> float | None:
        seg, sub = pair
        rec = stage_subtype_evaluation(local, seg, sub)
        if rec.stage == STAGE_SR:
            stage_self_reflection(local, rec, seg)
        return rec.sr_confidence

    pairs = [(seg, sub) for seg in dataset.segments for sub in local.typology.subtypes]
    if not pairs:
        raise CalibrationError("validation set is empty")
    workers = max(1, min(max_workers, len(pairs)))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        confidences = [c for c in executor.map(one, pairs) if c is not None]
    if not confidences:
        raise CalibrationError(
            "no self-reflection confidences were collected; the validation set "
            "produced no verifiable findings"
        )
    threshold = percentile_nearest_rank(confidences, percentile)
    return CalibrationResult(
        threshold=threshold,
        percentile=percentile,
        pool=tuple(sorted(confidences)),
    )


@dataclass(frozen=True)
class ThresholdEntry:
    model: str
    lang_pair: str
    threshold: float
    percentile: float
    pool_size: int
    validation_digest: str
    ordering: str = ORDERING


class ThresholdStore:
    """JSON-backed store of calibrated thresholds keyed by (model, lang_pair)."""

    def __init__(self, entries: Sequence[ThresholdEntry] = ()):
        self._entries: dict[tuple[str, str], ThresholdEntry] = {
            (e.model, e.lang_pair): e for e in entries
        }

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdStore":
        p = Path(path)
        if not p.exists():
            return cls()
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
            rows = doc["thresholds"]
        except (ValueError, KeyError) as exc:
            raise CalibrationError(f"threshold store {p} is malformed: {exc}") from exc
        entries = []
        for row in rows:
            try:
                entries.append(ThresholdEntry(**row))
            except TypeError as exc:
                raise CalibrationError(f"threshold store {p} row {row!r}: {exc}") from exc
        return cls(entries)

    def save(self, path: str | Path) -> None:
        rows = [asdict(self._entries[k]) for k in sorted(self._entries)]
        Path(path).write_text(
            json.dumps({"thresholds": rows}, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    def get(self, model: str, lang_pair: str) -> ThresholdEntry | None:
        return self._entries.get((model, lang_pair))

    def put(self, entry: ThresholdEntry) -> None:
        self._entries[(entry.model, entry.lang_pair)] = entry

    def __len__(self) -> int:
        return len(self._entries)


def entry_for(
    result: CalibrationResult, model: str, lang_pair: str, dataset: Dataset
) -> ThresholdEntry:
    return ThresholdEntry(
        model=model,
        lang_pair=lang_pair,
        threshold=result.threshold,
        percentile=result.percentile,
        pool_size=result.pool_size,
        validation_digest=dataset_digest(dataset),
    )
