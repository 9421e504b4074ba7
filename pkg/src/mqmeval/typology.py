"""MQM error typology: core categories, subtypes, and severity weights.

The bundled default typology has 5 core categories and 19 subtypes.  Scoring
weights follow standard MQM practice: 5 points for a major error, 1 point for
a minor error (0.1 for minor punctuation slips), 0 for neutral observations.
Weights are kept as exact rationals so that segment scores never accumulate
binary floating-point drift.
"""

from __future__ import annotations

import difflib
import enum
import hashlib
import json
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path

import yaml

__all__ = [
    "TypologyError",
    "Severity",
    "CoreCategory",
    "Subtype",
    "WeightTable",
    "Typology",
    "load_typology",
    "default_typology",
    "weight_of",
    "subtypes_of",
]


class TypologyError(ValueError):
    """Raised when a typology document is malformed or a lookup fails."""


class Severity(enum.Enum):
    MAJOR = "Major"
    MINOR = "Minor"
    NEUTRAL = "Neutral"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, token: str) -> "Severity":
        key = token.strip().lower()
        try:
            return _SEVERITY_BY_NAME[key]
        except KeyError:
            raise TypologyError(
                f"unknown severity {token!r}; expected Major, Minor, or Neutral"
            ) from None


_SEVERITY_BY_NAME = {s.value.lower(): s for s in Severity}


@dataclass(frozen=True)
class CoreCategory:
    id: str
    name: str
    description: str


@dataclass(frozen=True)
class Subtype:
    id: str
    core_id: str
    name: str
    description: str


class WeightTable:
    """Immutable map from (subtype_id, severity) to an exact rational weight."""

    def __init__(self, cells: dict[tuple[str, Severity], Fraction]):
        self._cells = dict(cells)

    def weight(self, subtype_id: str, severity: Severity) -> Fraction:
        try:
            return self._cells[(subtype_id, severity)]
        except KeyError:
            raise TypologyError(
                f"no weight entry for subtype {subtype_id!r} at severity {severity}"
            ) from None

    def cells(self) -> dict[tuple[str, Severity], Fraction]:
        return dict(self._cells)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, WeightTable) and self._cells == other._cells

    def __repr__(self) -> str:
        return f"WeightTable({len(self._cells)} cells)"


@dataclass(frozen=True)
class Typology:
    cores: tuple[CoreCategory, ...]
    subtypes: tuple[Subtype, ...]
    weights: WeightTable
    severity_definition: str

    def core_by_id(self, core_id: str) -> CoreCategory:
        for core in self.cores:
            if core.id == core_id:
                return core
        raise TypologyError(f"unknown core category {core_id!r}")

    def subtype_by_id(self, subtype_id: str) -> Subtype:
        for sub in self.subtypes:
            if sub.id == subtype_id:
                return sub
        raise TypologyError(f"unknown subtype {subtype_id!r}")

    def core_of(self, subtype_id: str) -> CoreCategory:
        return self.core_by_id(self.subtype_by_id(subtype_id).core_id)

    def subtypes_of(self, core_id: str) -> list[Subtype]:
        self.core_by_id(core_id)
        return [s for s in self.subtypes if s.core_id == core_id]

    def weight_of(self, subtype_id: str, severity: Severity) -> Fraction:
        self.subtype_by_id(subtype_id)
        return self.weights.weight(subtype_id, severity)

    def resolve_subtype(self, name: str) -> Subtype | None:
        """Map a free-form subtype name to a Subtype, or None.

        Resolution is fuzzy: exact id, exact normalized name, unambiguous
        prefix/containment, then closest-match with a conservative cutoff.
        Evaluation agents occasionally rephrase names ("Awkward style"), so
        strict equality would drop otherwise valid findings.
        """
        key = _normalize_name(name)
        if not key:
            return None
        by_norm = {_normalize_name(s.id): s for s in self.subtypes}
        by_norm.update({_normalize_name(s.name): s for s in self.subtypes})
        if key in by_norm:
            return by_norm[key]
        containing = [s for norm, s in by_norm.items() if key in norm or norm in key]
        if len(set(s.id for s in containing)) == 1:
            return containing[0]
        close = difflib.get_close_matches(key, list(by_norm), n=1, cutoff=0.8)
        if close:
            return by_norm[close[0]]
        return None

    def digest(self) -> str:
        """Stable sha256 over the typology content, for run metadata."""
        doc = {
            "cores": [[c.id, c.name, c.description] for c in self.cores],
            "subtypes": [[s.id, s.core_id, s.name, s.description] for s in self.subtypes],
            "weights": sorted(
                [sid, sev.value, str(w)] for (sid, sev), w in self.weights.cells().items()
            ),
            "severity_definition": self.severity_definition,
        }
        blob = json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _normalize_name(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", " ", name.lower()).strip()


def _as_fraction(value: object, context: str) -> Fraction:
    # str() first so that YAML floats keep their decimal meaning (0.1 -> 1/10).
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise TypologyError(f"{context}: weight {value!r} is not a number") from None


def _require(mapping: dict, key: str, context: str) -> object:
    if key not in mapping:
        raise TypologyError(f"{context}: missing required field {key!r}")
    return mapping[key]


def load_typology(source: str | Path) -> Typology:
    """Load and validate a typology document from a YAML file.

    Raises TypologyError on duplicate ids, dangling core references, missing
    or negative weight cells, or a nonzero Neutral weight.
    """
    text = Path(source).read_text(encoding="utf-8")
    return parse_typology(text)


def parse_typology(text: str) -> Typology:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TypologyError(f"typology document is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise TypologyError("typology document must be a mapping")

    severity_definition = str(_require(doc, "severity_definition", "typology")).strip()
    if not severity_definition:
        raise TypologyError("typology: severity_definition must be non-empty")

    cores: list[CoreCategory] = []
    seen_cores: set[str] = set()
    for i, row in enumerate(_require(doc, "cores", "typology") or []):
        ctx = f"cores[{i}]"
        core = CoreCategory(
            id=str(_require(row, "id", ctx)),
            name=str(_require(row, "name", ctx)),
            description=str(_require(row, "description", ctx)).strip(),
        )
        if core.id in seen_cores:
            raise TypologyError(f"duplicate core id {core.id!r}")
        seen_cores.add(core.id)
        cores.append(core)
    if not cores:
        raise TypologyError("typology: at least one core category is required")

    subtypes: list[Subtype] = []
    seen_subs: set[str] = set()
    for i, row in enumerate(_require(doc, "subtypes", "typology") or []):
        ctx = f"subtypes[{i}]"
        sub = Subtype(
            id=str(_require(row, "id", ctx)),
            core_id=str(_require(row, "core_id", ctx)),
            name=str(_require(row, "name", ctx)),
            description=str(_require(row, "description", ctx)).strip(),
        )
        if sub.id in seen_subs:
            raise TypologyError(f"duplicate subtype id {sub.id!r}")
        if sub.core_id not in seen_cores:
            raise TypologyError(
                f"dangling core reference: subtype {sub.id!r} names core {sub.core_id!r}"
            )
        seen_subs.add(sub.id)
        subtypes.append(sub)
    if not subtypes:
        raise TypologyError("typology: at least one subtype is required")

    fallback: dict[Severity, Fraction] = {}
    specific: dict[tuple[str, Severity], Fraction] = {}
    for i, row in enumerate(_require(doc, "weights", "typology") or []):
        ctx = f"weights[{i}]"
        sid = str(_require(row, "subtype_id", ctx))
        sev = Severity.parse(str(_require(row, "severity", ctx)))
        w = _as_fraction(_require(row, "weight", ctx), ctx)
        if w < 0:
            raise TypologyError(f"{ctx}: weight must be non-negative, got {w}")
        if sid == "*":
            if sev in fallback:
                raise TypologyError(f"{ctx}: duplicate fallback row for severity {sev}")
            fallback[sev] = w
        else:
            if sid not in seen_subs:
                raise TypologyError(f"{ctx}: weight names unknown subtype {sid!r}")
            if (sid, sev) in specific:
                raise TypologyError(f"{ctx}: duplicate weight row for ({sid!r}, {sev})")
            specific[(sid, sev)] = w

    cells: dict[tuple[str, Severity], Fraction] = {}
    for sub in subtypes:
        for sev in Severity:
            if (sub.id, sev) in specific:
                cells[(sub.id, sev)] = specific[(sub.id, sev)]
            elif sev in fallback:
                cells[(sub.id, sev)] = fallback[sev]
            else:
                raise TypologyError(
                    f"missing weight entry for subtype {sub.id!r} at severity {sev}"
                )
            if sev is Severity.NEUTRAL and cells[(sub.id, sev)] != 0:
                raise TypologyError(
                    f"Neutral weight must be 0, got {cells[(sub.id, sev)]} for {sub.id!r}"
                )

    return Typology(
        cores=tuple(cores),
        subtypes=tuple(subtypes),
        weights=WeightTable(cells),
        severity_definition=severity_definition,
    )


@lru_cache(maxsize=1)
def default_typology() -> Typology:
    text = resources.files("mqmeval.data").joinpath("typology.yaml").read_text("utf-8")
    return parse_typology(text)


def weight_of(t: Typology, subtype_id: str, severity: Severity) -> Fraction:
    return t.weight_of(subtype_id, severity)


def subtypes_of(t: Typology, core_id: str) -> list[Subtype]:
    return t.subtypes_of(core_id)
