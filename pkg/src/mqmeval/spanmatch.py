"""Soft span matching between detected and gold error spans.

Two token spans match at threshold theta when their longest common
contiguous token run L covers at least theta of each side: with G the gold
span and E the detected span, alpha = L/|G| and beta = L/|E| must both reach
theta.  Corpus-level precision/recall/F1 use a greedy one-to-one assignment
that consumes candidate pairs in order of decreasing run length.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

__all__ = [
    "TokenSpan",
    "MatchVerdict",
    "tokenize",
    "match",
    "prf",
    "sweep",
    "write_sweep_csv",
    "SweepRow",
]

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# Languages written without spaces are split into single characters.
_UNSPACED_LANGS = {"zh", "ja", "th"}


@dataclass(frozen=True)
class TokenSpan:
    tokens: tuple[str, ...]
    origin: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class MatchVerdict:
    matched: bool
    run_length: int
    alpha: float
    beta: float


def tokenize(
    text: str,
    lang: str = "en",
    tokenizer: Callable[[str], Sequence[str]] | None = None,
) -> TokenSpan:
    """Lowercased word/punctuation tokens; per-character for unspaced scripts.

    A custom ``tokenizer`` overrides the default behavior entirely.
    """
    if tokenizer is not None:
        tokens = tuple(tokenizer(text))
    elif lang.split("-")[0].split("_")[0].lower() in _UNSPACED_LANGS:
        tokens = tuple(ch.lower() for ch in text if not ch.isspace())
    else:
        tokens = tuple(_WORD_RE.findall(text.lower()))
    return TokenSpan(tokens=tokens, origin=text)


def _longest_common_run(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest contiguous token run shared by a and b."""
    best = 0
    for length in range(min(len(a), len(b)), 0, -1):
        windows = {tuple(b[j : j + length]) for j in range(len(b) - length + 1)}
        if any(tuple(a[i : i + length]) in windows for i in range(len(a) - length + 1)):
            best = length
            break
    return best


def _check_theta(theta: float) -> None:
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")


def match(gold: TokenSpan, detected: TokenSpan, theta: float) -> MatchVerdict:
    """Compare one gold span against one detected span at threshold theta."""
    _check_theta(theta)
    if len(gold) == 0 or len(detected) == 0:
        raise ValueError("spans must contain at least one token")
    run = _longest_common_run(gold.tokens, detected.tokens)
    alpha = run / len(gold)
    beta = run / len(detected)
    return MatchVerdict(
        matched=(alpha >= theta and beta >= theta),
        run_length=run,
        alpha=alpha,
        beta=beta,
    )


def _assignment(
    detected: Sequence[TokenSpan], gold: Sequence[TokenSpan], theta: float
) -> list[tuple[int, int]]:
    """Greedy one-to-one pairing of matching spans, longest runs first."""
    candidates: list[tuple[int, int, int]] = []
    for di, d in enumerate(detected):
        if len(d) == 0:
            continue
        for gi, g in enumerate(gold):
            if len(g) == 0:
                continue
            verdict = match(g, d, theta)
            if verdict.matched:
                candidates.append((-verdict.run_length, di, gi))
    candidates.sort()
    used_d: set[int] = set()
    used_g: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for _, di, gi in candidates:
        if di in used_d or gi in used_g:
            continue
        used_d.add(di)
        used_g.add(gi)
        pairs.append((di, gi))
    return pairs


def _ratio(hits: int, total: int, other_total: int) -> float:
    if total == 0:
        return 1.0 if other_total == 0 else 0.0
    return hits / total


def prf(
    detected: Sequence[TokenSpan], gold: Sequence[TokenSpan], theta: float
) -> tuple[float, float, float]:
    """Precision, recall, F1 for one segment's spans at threshold theta.

    Empty sides follow the usual conventions: with nothing detected,
    precision is 1 when there is also no gold and 0 otherwise (and
    symmetrically for recall); F1 is 0 when precision + recall is 0.
    """
    _check_theta(theta)
    hits = len(_assignment(detected, gold, theta))
    precision = _ratio(hits, len(detected), len(gold))
    recall = _ratio(hits, len(gold), len(detected))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


@dataclass(frozen=True)
class SweepRow:
    theta: float
    precision: float
    recall: float
    f1: float


def sweep(
    detected_by_key: Mapping[object, Sequence[TokenSpan]],
    gold_by_key: Mapping[object, Sequence[TokenSpan]],
    thetas: Iterable[float],
) -> list[SweepRow]:
    """Micro-averaged corpus P/R/F1 at each threshold.

    Matching is confined to spans sharing a key (typically (system, seg_id))
    so detections can never pair with gold spans from other segments.
    """
    keys = sorted(set(detected_by_key) | set(gold_by_key), key=repr)
    rows = []
    for theta in thetas:
        _check_theta(theta)
        hits = det_total = gold_total = 0
        for key in keys:
            detected = list(detected_by_key.get(key, ()))
            gold = list(gold_by_key.get(key, ()))
            hits += len(_assignment(detected, gold, theta))
            det_total += len(detected)
            gold_total += len(gold)
        precision = _ratio(hits, det_total, gold_total)
        recall = _ratio(hits, gold_total, det_total)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        rows.append(SweepRow(theta=float(theta), precision=precision, recall=recall, f1=f1))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    lines = ["theta,precision,recall,f1"]
    for row in rows:
        lines.append(
            f"{row.theta:.6f},{row.precision:.6f},{row.recall:.6f},{row.f1:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
