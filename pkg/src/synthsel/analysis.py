"""Corpus-lexicon analytics: vocabulary extraction, unseen-word counting
per scoring range, utterance filtering, and score-distribution reports.

Tokens are whitespace-split, uppercased, and stripped of leading and
trailing punctuation; internal apostrophes survive (matching the
uppercase apostrophe-bearing transcript convention of read-speech
corpora).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Manifest
from .scorer import ScoreRecord
from .selection import SelectionError, SelectionRange, SelectionResult

_STRIP_CHARS = string.punctuation


class AnalysisError(ValueError):
    """Invalid analysis input (e.g. overlapping ranges)."""


@dataclass(frozen=True)
class Vocabulary:
    words: frozenset[str]
    source: str

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def __len__(self) -> int:
        return len(self.words)


def tokenize(text: str) -> list[str]:
    """Uppercased tokens with edge punctuation stripped; empties dropped."""
    out = []
    for raw in text.split():
        token = raw.upper().strip(_STRIP_CHARS)
        if token:
            out.append(token)
    return out


def vocabulary(manifest: Manifest, source: str = "") -> Vocabulary:
    words: set[str] = set()
    for entry in manifest.entries:
        words.update(tokenize(entry.text))
    return Vocabulary(words=frozenset(words), source=source)


@dataclass(frozen=True)
class UnseenWordsReport:
    """Words in the eval transcripts and the candidate pool but not in
    the training vocabulary."""

    words: tuple[str, ...]  # sorted
    count: int


def unseen_words(train_vocab: Vocabulary, eval_manifest: Manifest,
                 candidate_pool: Manifest) -> UnseenWordsReport:
    eval_words = vocabulary(eval_manifest).words
    pool_words = vocabulary(candidate_pool).words
    found = sorted((eval_words & pool_words) - train_vocab.words)
    return UnseenWordsReport(words=tuple(found), count=len(found))


def utterances_containing(pool: Manifest, words: Sequence[str]) -> tuple[int, tuple[str, ...]]:
    """Count and sorted ids of pool utterances whose tokens hit the word list."""
    wanted = {w.upper() for w in words}
    ids = sorted(e.id for e in pool.entries if wanted & set(tokenize(e.text)))
    return len(ids), tuple(ids)


def filter_unseen_and_resample(sel: SelectionResult, pool: Manifest, words: Sequence[str],
                               records: Sequence[ScoreRecord], srange: SelectionRange,
                               seed: int = 0) -> SelectionResult:
    """Swap selected utterances containing the given words for same-range
    utterances without them, keeping the selection size when possible."""
    _, with_words = utterances_containing(pool, words)
    with_set = set(with_words)
    kept = [i for i in sel.ids if i not in with_set]
    removed = len(sel.ids) - len(kept)
    selected = set(sel.ids)
    candidates = [r.utterance_id for r in records
                  if r.score in srange
                  and r.utterance_id not in selected
                  and r.utterance_id not in with_set]
    rng = np.random.default_rng(seed)
    n_repl = min(removed, len(candidates))
    replacements = set()
    if n_repl:
        picks = rng.choice(len(candidates), size=n_repl, replace=False)
        replacements = {candidates[int(i)] for i in picks}
    keep = set(kept) | replacements
    order = {r.utterance_id: i for i, r in enumerate(records)}
    ids = tuple(sorted(keep, key=order.__getitem__))
    return SelectionResult(ids=ids, criterion=f"{sel.criterion} minus {len(with_set)} flagged words",
                           pool_size=sel.pool_size, pool_ids=sel.pool_ids)


# ---------------------------------------------------------------------------
# Score-distribution report
# ---------------------------------------------------------------------------

N_HISTOGRAM_BINS = 50


@dataclass(frozen=True)
class RangeCount:
    srange: SelectionRange
    count: int
    fraction: float


@dataclass(frozen=True)
class SelectionReport:
    method: str
    total: int
    ranges: tuple[RangeCount, ...]
    bin_edges: tuple[float, ...]  # N_HISTOGRAM_BINS + 1 edges
    bin_counts: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "total": self.total,
            "ranges": [
                {"low": rc.srange.low, "high": rc.srange.high,
                 "count": rc.count, "fraction": rc.fraction}
                for rc in self.ranges
            ],
            "histogram": {"edges": list(self.bin_edges), "counts": list(self.bin_counts)},
        }


def _check_disjoint(ranges: Sequence[SelectionRange]) -> None:
    ordered = sorted(ranges, key=lambda r: r.low)
    for a, b in zip(ordered, ordered[1:]):
        if b.low < a.high:
            raise AnalysisError(f"overlapping ranges [{a.low}, {a.high}) and [{b.low}, {b.high})")


def selection_report(records: Sequence[ScoreRecord], ranges: Sequence[SelectionRange],
                     n_bins: int = N_HISTOGRAM_BINS) -> SelectionReport:
    """Per-range counts and fractions plus a fixed-width score histogram.

    Histogram bins span the observed score range; the top edge is
    inclusive so the maximum lands in the last bin.
    """
    _check_disjoint(ranges)
    scores = np.array([r.score for r in records], dtype=np.float64)
    total = len(scores)
    range_counts = []
    for rng_ in ranges:
        count = int(np.count_nonzero((scores >= rng_.low) & (scores < rng_.high))) if total else 0
        range_counts.append(RangeCount(rng_, count, count / total if total else 0.0))
    if total:
        lo, hi = float(scores.min()), float(scores.max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        idx = np.minimum(((scores - lo) / (hi - lo) * n_bins).astype(int), n_bins - 1)
        counts = np.bincount(idx, minlength=n_bins)
    else:
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        counts = np.zeros(n_bins, dtype=int)
    method = records[0].method if records else "none"
    return SelectionReport(method=method, total=total, ranges=tuple(range_counts),
                           bin_edges=tuple(float(e) for e in edges),
                           bin_counts=tuple(int(c) for c in counts))


def render_histogram_text(report: SelectionReport, width: int = 60) -> str:
    """Plain-text histogram, one line per bin."""
    lines = [f"score histogram ({report.method}, n={report.total})"]
    peak = max(report.bin_counts) if report.bin_counts else 0
    for i, count in enumerate(report.bin_counts):
        lo, hi = report.bin_edges[i], report.bin_edges[i + 1]
        bar = "#" * (round(width * count / peak) if peak else 0)
        lines.append(f"[{lo:+.4f}, {hi:+.4f}) {count:6d} {bar}")
    return "\n".join(lines) + "\n"


def write_report_json(path: str | Path, report: SelectionReport,
                      extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_json_dict()
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_ranges_tsv(path: str | Path, report: SelectionReport) -> Path:
    """Delimited per-range counts: low, high, count, fraction."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("low\thigh\tcount\tfraction\n")
        for rc in report.ranges:
            fh.write(f"{rc.srange.low:g}\t{rc.srange.high:g}\t{rc.count}\t{rc.fraction:.6f}\n")
    return path
