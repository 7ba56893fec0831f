"""Turning score files into selected subsets.

Criteria: half-open score ranges [low, high), top/bottom fractions with
ceil(p*N) rounding and lexicographic id tie-breaking, and seeded random
sampling. Selected ids always keep score-file order; the criterion only
decides membership.

Selection files: one id per line, plus a JSON sidecar
``{criterion, pool_size, selected_count, fraction}``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Manifest, ManifestError
from .scorer import ScoreRecord


class SelectionError(ValueError):
    """Invalid selection criterion or inputs."""


@dataclass(frozen=True)
class SelectionRange:
    """Half-open interval [low, high)."""

    low: float
    high: float

    def __post_init__(self) -> None:
        if not self.low < self.high:
            raise SelectionError(f"range low must be < high, got [{self.low}, {self.high})")

    def __contains__(self, score: float) -> bool:
        return self.low <= score < self.high

    def describe(self) -> str:
        return f"range:{self.low:g}:{self.high:g}"


@dataclass(frozen=True)
class TopFraction:
    p: float

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise SelectionError(f"fraction must lie in (0, 1], got {self.p}")

    def describe(self) -> str:
        return f"top:{self.p:g}"


@dataclass(frozen=True)
class BottomFraction:
    p: float

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise SelectionError(f"fraction must lie in (0, 1], got {self.p}")

    def describe(self) -> str:
        return f"bottom:{self.p:g}"


@dataclass(frozen=True)
class RandomFraction:
    p: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise SelectionError(f"fraction must lie in (0, 1], got {self.p}")

    def describe(self) -> str:
        return f"random:{self.p:g}:{self.seed}"


Criterion = SelectionRange | TopFraction | BottomFraction | RandomFraction


def parse_criterion(text: str, default_seed: int = 0) -> Criterion:
    """Parse ``range:LOW:HIGH``, ``top:P``, ``bottom:P``, ``random:P[:SEED]``."""
    parts = text.strip().split(":")
    kind = parts[0].lower()
    try:
        if kind == "range" and len(parts) == 3:
            return SelectionRange(float(parts[1]), float(parts[2]))
        if kind == "top" and len(parts) == 2:
            return TopFraction(float(parts[1]))
        if kind == "bottom" and len(parts) == 2:
            return BottomFraction(float(parts[1]))
        if kind == "random" and len(parts) in (2, 3):
            seed = int(parts[2]) if len(parts) == 3 else default_seed
            return RandomFraction(float(parts[1]), seed)
    except ValueError as exc:
        raise SelectionError(f"bad criterion {text!r}: {exc}") from exc
    raise SelectionError(f"bad criterion {text!r} (expected range:L:H, top:P, bottom:P, random:P[:SEED])")


@dataclass(frozen=True)
class SelectionResult:
    """Ids selected from a scored pool, in score-file order."""

    ids: tuple[str, ...]
    criterion: str
    pool_size: int
    pool_ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise SelectionError("selected ids must be unique")
        if self.pool_size < len(self.ids):
            raise SelectionError("pool cannot be smaller than the selection")

    @property
    def fraction(self) -> float:
        return len(self.ids) / self.pool_size if self.pool_size else 0.0


def select(records: Sequence[ScoreRecord], criterion: Criterion) -> SelectionResult:
    """Apply a criterion to a score file; output keeps score-file order."""
    if not records:
        raise SelectionError("cannot select from an empty score file")
    pool_ids = tuple(r.utterance_id for r in records)
    if isinstance(criterion, SelectionRange):
        chosen = {r.utterance_id for r in records if r.score in criterion}
    elif isinstance(criterion, TopFraction):
        k = math.ceil(criterion.p * len(records))
        ranked = sorted(records, key=lambda r: (-r.score, r.utterance_id))
        chosen = {r.utterance_id for r in ranked[:k]}
    elif isinstance(criterion, BottomFraction):
        k = math.ceil(criterion.p * len(records))
        ranked = sorted(records, key=lambda r: (r.score, r.utterance_id))
        chosen = {r.utterance_id for r in ranked[:k]}
    elif isinstance(criterion, RandomFraction):
        k = math.ceil(criterion.p * len(records))
        rng = np.random.default_rng(criterion.seed)
        picks = rng.choice(len(records), size=k, replace=False)
        chosen = {records[int(i)].utterance_id for i in picks}
    else:
        raise SelectionError(f"unknown criterion type {type(criterion).__name__}")
    ids = tuple(i for i in pool_ids if i in chosen)
    return SelectionResult(ids=ids, criterion=criterion.describe(),
                           pool_size=len(records), pool_ids=pool_ids)


def fuse_intersection(a: SelectionResult, b: SelectionResult) -> SelectionResult:
    """Ids chosen by both selections, ordered as in `a`.

    Mismatched pools produce a warning and the fusion proceeds over the
    pool intersection.
    """
    pool_ids = None
    pool_size = max(a.pool_size, b.pool_size)
    if a.pool_ids is not None and b.pool_ids is not None:
        if set(a.pool_ids) != set(b.pool_ids):
            warnings.warn("fusing selections drawn from different pools; "
                          "using the pool intersection", stacklevel=2)
            common = set(a.pool_ids) & set(b.pool_ids)
            pool_ids = tuple(i for i in a.pool_ids if i in common)
        else:
            pool_ids = a.pool_ids
        pool_size = len(pool_ids)
    elif a.pool_size != b.pool_size:
        warnings.warn(f"fusing selections with differing pool sizes "
                      f"({a.pool_size} vs {b.pool_size})", stacklevel=2)
    in_b = set(b.ids)
    ids = tuple(i for i in a.ids if i in in_b)
    return SelectionResult(ids=ids, criterion=f"intersect({a.criterion}, {b.criterion})",
                           pool_size=pool_size, pool_ids=pool_ids)


def build_augmented_manifest(base: Manifest, pool: Manifest, sel: SelectionResult) -> Manifest:
    """Base entries followed by the selected pool entries, labels preserved."""
    pool_by_id = pool.by_id()
    missing = [i for i in sel.ids if i not in pool_by_id]
    if missing:
        raise ManifestError(f"selected id {missing[0]!r} not found in pool manifest")
    entries = base.entries + tuple(pool_by_id[i] for i in sel.ids)
    return Manifest(entries, root=base.root)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_selection(path: str | Path, sel: SelectionResult, extra: dict | None = None) -> Path:
    """Write ids one per line plus a ``<name>.json`` metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}\n" for i in sel.ids), encoding="utf-8")
    meta = {
        "criterion": sel.criterion,
        "pool_size": sel.pool_size,
        "selected_count": len(sel.ids),
        "fraction": sel.fraction,
    }
    if extra:
        meta.update(extra)
    sidecar = path.parent / (path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_selection(path: str | Path) -> SelectionResult:
    path = Path(path)
    ids = tuple(line for line in path.read_text(encoding="utf-8").splitlines() if line)
    sidecar = path.parent / (path.name + ".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return SelectionResult(ids=ids, criterion=str(meta["criterion"]),
                           pool_size=int(meta["pool_size"]))
