"""Evaluation corpora: segments, gold error annotations, TSV round-tripping.

Datasets arrive as two UTF-8 TSV files with header rows.  Segment rows carry
``system domain doc_id seg_id source target reference``; annotation rows carry
``system seg_id subtype severity span_text span_start span_end``.  Tabs,
newlines, and backslashes inside fields are backslash-escaped so the files
stay strictly one row per line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .typology import Severity, Typology, TypologyError

__all__ = [
    "DatasetError",
    "Segment",
    "GoldAnnotation",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "gold_score",
    "length_bucket",
    "slice_dataset",
    "dataset_digest",
]

SEGMENT_COLUMNS = ("system", "domain", "doc_id", "seg_id", "source", "target", "reference")
ANNOTATION_COLUMNS = (
    "system",
    "seg_id",
    "subtype",
    "severity",
    "span_text",
    "span_start",
    "span_end",
)

# Word-count length buckets; sources in unspaced scripts are bucketed by
# character count instead.
SHORT_MAX_EXCLUSIVE = 12
LONG_MIN_EXCLUSIVE = 27


class DatasetError(ValueError):
    """Raised for malformed dataset files or failed lookups."""


@dataclass(frozen=True)
class Segment:
    system: str
    domain: str
    doc_id: str
    seg_id: str
    source: str
    translation: str
    reference: str | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.system, self.seg_id)


@dataclass(frozen=True)
class GoldAnnotation:
    system: str
    seg_id: str
    subtype: str
    severity: Severity
    span_text: str
    span_start: int = -1
    span_end: int = -1

    @property
    def has_offsets(self) -> bool:
        return self.span_start >= 0 and self.span_end >= 0


@dataclass
class Dataset:
    name: str
    segments: list[Segment] = field(default_factory=list)
    gold: list[GoldAnnotation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_key = {seg.key: seg for seg in self.segments}

    def segment(self, system: str, seg_id: str) -> Segment:
        try:
            return self._by_key[(system, seg_id)]
        except KeyError:
            raise DatasetError(f"no segment for system={system!r} seg_id={seg_id!r}") from None

    def gold_for(self, system: str, seg_id: str) -> list[GoldAnnotation]:
        return [a for a in self.gold if a.system == system and a.seg_id == seg_id]

    def systems(self) -> list[str]:
        seen: list[str] = []
        for seg in self.segments:
            if seg.system not in seen:
                seen.append(seg.system)
        return seen


def _escape(value: str) -> str:
    return (
        value.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape(value: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt)
            if mapped is not None:
                out.append(mapped)
                i += 2
                continue
        out.append(ch)
        i += 1
    return "".join(out)


def _read_rows(path: Path, columns: tuple[str, ...], kind: str) -> list[list[str]]:
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError(f"{kind} file {path} is empty")
    header = lines[0].split("\t")
    if header != list(columns):
        raise DatasetError(
            f"{kind} file {path}: bad header {header!r}, expected {list(columns)!r}"
        )
    rows: list[list[str]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        fields = [_unescape(f) for f in line.split("\t")]
        if len(fields) != len(columns):
            raise DatasetError(
                f"{kind} row {lineno}: expected {len(columns)} fields, got {len(fields)}"
            )
        rows.append(fields)
    return rows


def load_dataset(
    segments_file: str | Path,
    annotations_file: str | Path | None = None,
    name: str | None = None,
) -> Dataset:
    """Read a dataset from TSV files.

    Annotation rows must point at a loaded segment ("dangling" rows are an
    error).  Span offsets that do not reproduce span_text against the
    translation are discarded with a dataset-level warning rather than
    rejected: several gold exports carry stale offsets but reliable text.
    """
    segments_path = Path(segments_file)
    segments: list[Segment] = []
    seen: set[tuple[str, str]] = set()
    for lineno, row in enumerate(_read_rows(segments_path, SEGMENT_COLUMNS, "segments"), 2):
        system, domain, doc_id, seg_id, source, target, reference = row
        if not source or not target:
            raise DatasetError(f"segments row {lineno}: empty source or target")
        key = (system, seg_id)
        if key in seen:
            raise DatasetError(f"segments row {lineno}: duplicate (system, seg_id) {key!r}")
        seen.add(key)
        segments.append(
            Segment(
                system=system,
                domain=domain,
                doc_id=doc_id,
                seg_id=seg_id,
                source=source,
                translation=target,
                reference=reference or None,
            )
        )

    gold: list[GoldAnnotation] = []
    warnings: list[str] = []
    if annotations_file is not None:
        by_key = {seg.key: seg for seg in segments}
        rows = _read_rows(Path(annotations_file), ANNOTATION_COLUMNS, "annotations")
        for lineno, row in enumerate(rows, 2):
            system, seg_id, subtype, severity_text, span_text, start_text, end_text = row
            if (system, seg_id) not in by_key:
                raise DatasetError(
                    f"dangling annotation row {lineno}: ({system!r}, {seg_id!r}) "
                    "matches no segment"
                )
            severity = Severity.parse(severity_text)
            try:
                start, end = int(start_text), int(end_text)
            except ValueError:
                raise DatasetError(
                    f"annotations row {lineno}: offsets must be integers"
                ) from None
            if start >= 0 and end >= 0:
                translation = by_key[(system, seg_id)].translation
                if translation[start:end] != span_text:
                    warnings.append(
                        f"annotations row {lineno}: offsets [{start}:{end}] do not "
                        f"reproduce span text; keeping text only"
                    )
                    start = end = -1
            gold.append(
                GoldAnnotation(
                    system=system,
                    seg_id=seg_id,
                    subtype=subtype,
                    severity=severity,
                    span_text=span_text,
                    span_start=start,
                    span_end=end,
                )
            )

    return Dataset(
        name=name or segments_path.stem,
        segments=segments,
        gold=gold,
        warnings=warnings,
    )


def save_dataset(
    dataset: Dataset,
    segments_file: str | Path,
    annotations_file: str | Path | None = None,
) -> None:
    seg_lines = ["\t".join(SEGMENT_COLUMNS)]
    for seg in dataset.segments:
        seg_lines.append(
            "\t".join(
                _escape(v)
                for v in (
                    seg.system,
                    seg.domain,
                    seg.doc_id,
                    seg.seg_id,
                    seg.source,
                    seg.translation,
                    seg.reference or "",
                )
            )
        )
    Path(segments_file).write_text("\n".join(seg_lines) + "\n", encoding="utf-8")

    if annotations_file is not None:
        ann_lines = ["\t".join(ANNOTATION_COLUMNS)]
        for ann in dataset.gold:
            ann_lines.append(
                "\t".join(
                    _escape(v)
                    for v in (
                        ann.system,
                        ann.seg_id,
                        ann.subtype,
                        ann.severity.value,
                        ann.span_text,
                        str(ann.span_start),
                        str(ann.span_end),
                    )
                )
            )
        Path(annotations_file).write_text("\n".join(ann_lines) + "\n", encoding="utf-8")


def gold_score(dataset: Dataset, typology: Typology, system: str, seg_id: str) -> Fraction:
    """Negative sum of annotation weights for one segment (0 when clean)."""
    dataset.segment(system, seg_id)
    total = Fraction(0)
    for ann in dataset.gold_for(system, seg_id):
        sub = typology.resolve_subtype(ann.subtype)
        if sub is None:
            raise TypologyError(
                f"annotation subtype {ann.subtype!r} is not in the active typology"
            )
        total += typology.weight_of(sub.id, ann.severity)
    return -total


def _is_unspaced(text: str) -> bool:
    """True when the text is predominantly in a script written without spaces."""
    cjk = 0
    letters = 0
    for ch in text:
        code = ord(ch)
        if (
            0x2E80 <= code <= 0x9FFF  # CJK radicals through unified ideographs
            or 0x3040 <= code <= 0x30FF  # hiragana, katakana
            or 0xF900 <= code <= 0xFAFF
            or 0x0E00 <= code <= 0x0E7F  # Thai
        ):
            cjk += 1
            letters += 1
        elif ch.isalpha():
            letters += 1
    return letters > 0 and cjk * 2 >= letters


def source_length(seg: Segment) -> int:
    if _is_unspaced(seg.source):
        return sum(1 for ch in seg.source if not ch.isspace())
    return len(seg.source.split())


def length_bucket(seg: Segment) -> str:
    """Bucket a segment by source length: short < 12, medium 12..27, long > 27."""
    n = source_length(seg)
    if n < SHORT_MAX_EXCLUSIVE:
        return "short"
    if n > LONG_MIN_EXCLUSIVE:
        return "long"
    return "medium"


def slice_dataset(dataset: Dataset, by: str) -> dict[str, list[Segment]]:
    """Partition segments by "domain", "length", or "system"."""
    if by == "domain":
        keyfn = lambda seg: seg.domain
    elif by == "length":
        keyfn = length_bucket
    elif by == "system":
        keyfn = lambda seg: seg.system
    else:
        raise DatasetError(f"unknown slice axis {by!r}; expected domain, length, or system")
    out: dict[str, list[Segment]] = {}
    for seg in dataset.segments:
        out.setdefault(keyfn(seg), []).append(seg)
    return out


def dataset_digest(dataset: Dataset) -> str:
    doc = {
        "segments": [
            [s.system, s.domain, s.doc_id, s.seg_id, s.source, s.translation, s.reference or ""]
            for s in dataset.segments
        ],
        "gold": [
            [a.system, a.seg_id, a.subtype, a.severity.value, a.span_text, a.span_start, a.span_end]
            for a in dataset.gold
        ],
    }
    blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
