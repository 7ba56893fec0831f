"""Acoustic-unit baseline: k-means over MFCC frames plus an n-gram unit
language model scored by next-unit accuracy or perplexity.

K-means is Lloyd's algorithm with seeded k-means++ initialization,
run until the assignment reaches a fixpoint. Empty clusters are
re-seeded from the point farthest from its assigned centroid. Frame
assignment breaks distance ties toward the lowest centroid index.

The LM is an add-alpha smoothed n-gram over unit ids with histories
left-padded by a start symbol: P(u | h) = (count(h,u) + a) / (count(h) + a*K).

Codebook files: ``b"CDBK"``, version, K, D (uint32-LE), seed
(int64-LE), inertia history length (uint32-LE) + float64-LE values,
then K*D centroid float32-LE values. Unit sequences are TSV lines of
``id<TAB>space-separated units``.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Manifest, read_audio
from .dsp import DspConfig, FeatureMatrix, mfcc
from .scorer import ScoreFailure, ScoreRecord, ULM_ACC, ULM_PPL

START = -1  # history padding symbol; never a unit

_CDBK_MAGIC = b"CDBK"
_CDBK_VERSION = 1


class UlmError(ValueError):
    """Invalid unit-model input."""


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (K, D) float32
    seed: int
    inertia_history: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise UlmError("codebook needs a (K, D) centroid matrix with K >= 2")
        k = self.centroids.shape[0]
        uniq = np.unique(self.centroids, axis=0).shape[0]
        if uniq != k:
            raise UlmError(f"centroids must be pairwise distinct ({k - uniq + 1} coincide)")
        hist = self.inertia_history
        if any(hist[i + 1] > hist[i] + 1e-9 for i in range(len(hist) - 1)):
            raise UlmError("inertia history must be non-increasing")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class UnitSequence:
    utterance_id: str
    units: np.ndarray  # (T,) int64


def _min_dists_sq(frames: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Squared distance from each frame to its nearest centroid."""
    out = np.empty(len(frames))
    for s in range(0, len(frames), chunk):
        block = frames[s:s + chunk]
        d = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[s:s + chunk] = d.min(axis=1)
    return out


def _assign(frames: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Nearest-centroid index per frame; ties go to the lowest index."""
    out = np.empty(len(frames), dtype=np.int64)
    for s in range(0, len(frames), chunk):
        block = frames[s:s + chunk]
        d = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        out[s:s + chunk] = d.argmin(axis=1)
    return out


def _kmeanspp_init(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[int(rng.integers(len(frames)))]
    d2 = ((frames - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass on already-chosen points; fall back to uniform
            idx = int(rng.integers(len(frames)))
        else:
            idx = int(rng.choice(len(frames), p=d2 / total))
        centroids[j] = frames[idx]
        d2 = np.minimum(d2, ((frames - centroids[j]) ** 2).sum(axis=1))
    return centroids


def train_codebook(frames: np.ndarray, k: int = 100, seed: int = 0,
                   max_iters: int = 100) -> Codebook:
    """Lloyd iterations from a seeded k-means++ start.

    Stops at an assignment fixpoint or after max_iters. The recorded
    inertia history (sum of squared distances to the nearest centroid,
    one value per iteration) is non-increasing.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise UlmError(f"frames must be (N, D), got shape {frames.shape}")
    if len(frames) < k:
        raise UlmError(f"need at least K={k} frames, got {len(frames)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(frames, k, rng)
    assignment = _assign(frames, centroids)
    history: list[float] = [float(_min_dists_sq(frames, centroids).sum())]
    for _ in range(max_iters):
        for j in range(k):
            members = frames[assignment == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        empties = [j for j in range(k) if not np.any(assignment == j)]
        if empties:
            dists = _min_dists_sq(frames, centroids)
            taken: set[int] = set()
            for j in empties:
                order = np.argsort(-dists, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                centroids[j] = frames[far]
                dists[far] = 0.0
        history.append(float(_min_dists_sq(frames, centroids).sum()))
        new_assignment = _assign(frames, centroids)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return Codebook(centroids=centroids.astype(np.float32), seed=seed,
                    inertia_history=tuple(history))


def quantize(features: FeatureMatrix, codebook: Codebook, utterance_id: str = "") -> UnitSequence:
    """Map each frame to its nearest centroid (Euclidean, lowest index on ties)."""
    if features.dim != codebook.dim:
        raise UlmError(f"feature dim {features.dim} != codebook dim {codebook.dim}")
    units = _assign(features.frames.astype(np.float64), codebook.centroids.astype(np.float64))
    return UnitSequence(utterance_id=utterance_id, units=units)


# ---------------------------------------------------------------------------
# N-gram unit LM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NgramLm:
    order: int
    k: int
    alpha: float
    counts: dict[tuple[int, ...], dict[int, int]]

    def __post_init__(self) -> None:
        if self.order < 1:
            raise UlmError("order must be >= 1")
        if self.k < 1:
            raise UlmError("vocabulary size must be >= 1")
        if self.alpha <= 0:
            raise UlmError("smoothing alpha must be positive")

    def context_total(self, history: tuple[int, ...]) -> int:
        table = self.counts.get(history)
        return sum(table.values()) if table else 0

    def prob(self, unit: int, history: tuple[int, ...]) -> float:
        table = self.counts.get(history)
        c = table.get(int(unit), 0) if table else 0
        total = sum(table.values()) if table else 0
        return (c + self.alpha) / (total + self.alpha * self.k)

    def log_prob(self, unit: int, history: tuple[int, ...]) -> float:
        return float(np.log(self.prob(unit, history)))

    def argmax(self, history: tuple[int, ...]) -> int:
        """Most probable next unit; ties resolved to the lowest unit id."""
        table = self.counts.get(history)
        if not table:
            return 0
        best_count = max(table.values())
        best = min(u for u, c in table.items() if c == best_count)
        # smoothing adds alpha uniformly, so unseen units can never win;
        # unit 0 only wins a tie against count-0 units when best_count is 0
        return best


def _histories(units: np.ndarray, order: int) -> Iterable[tuple[tuple[int, ...], int]]:
    padded = [START] * (order - 1) + [int(u) for u in units]
    for t in range(len(units)):
        yield tuple(padded[t:t + order - 1]), int(units[t])


def train_unit_lm(sequences: Sequence[UnitSequence], k: int, order: int = 3,
                  alpha: float = 0.5) -> NgramLm:
    """Count (history, next-unit) pairs with start-padded histories."""
    total_units = sum(len(s.units) for s in sequences)
    if total_units < order:
        raise UlmError(f"need at least {order} units to train an order-{order} model")
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    for seq in sequences:
        if len(seq.units) and (seq.units.min() < 0 or seq.units.max() >= k):
            raise UlmError(f"{seq.utterance_id}: unit ids must lie in [0, {k})")
        for history, unit in _histories(seq.units, order):
            table = counts.setdefault(history, {})
            table[unit] = table.get(unit, 0) + 1
    return NgramLm(order=order, k=k, alpha=alpha, counts=counts)


def ulm_perplexity(lm: NgramLm, seq: UnitSequence) -> float:
    """exp(-mean log P(u_t | h_t)) over all positions of the sequence."""
    if not len(seq.units):
        raise UlmError("cannot score an empty unit sequence")
    total = 0.0
    for history, unit in _histories(seq.units, lm.order):
        total += lm.log_prob(unit, history)
    return float(np.exp(-total / len(seq.units)))


def ulm_accuracy(lm: NgramLm, seq: UnitSequence) -> float:
    """Fraction of positions where the LM argmax equals the observed unit."""
    if not len(seq.units):
        raise UlmError("cannot score an empty unit sequence")
    hits = 0
    for history, unit in _histories(seq.units, lm.order):
        if lm.argmax(history) == unit:
            hits += 1
    return hits / len(seq.units)


def ulm_score_corpus(lm: NgramLm, codebook: Codebook, manifest: Manifest, metric: str,
                     dsp_cfg: DspConfig = DspConfig(),
                     feature_loader: Callable | None = None,
                     threads: int = 1) -> tuple[list[ScoreRecord], list[ScoreFailure]]:
    """Quantize and score every entry; manifest order, skip-and-report failures."""
    if metric not in (ULM_ACC, ULM_PPL):
        raise UlmError(f"metric must be {ULM_ACC} or {ULM_PPL}, got {metric!r}")

    def _load(entry) -> FeatureMatrix:
        if feature_loader is not None:
            return feature_loader(entry)
        return mfcc(read_audio(manifest.resolve_audio(entry)), dsp_cfg)

    results: dict[int, ScoreRecord] = {}
    failures: dict[int, ScoreFailure] = {}

    def _one(i: int) -> None:
        entry = manifest.entries[i]
        try:
            seq = quantize(_load(entry), codebook, utterance_id=entry.id)
            value = ulm_accuracy(lm, seq) if metric == ULM_ACC else ulm_perplexity(lm, seq)
            results[i] = ScoreRecord(entry.id, float(value), metric)
        except Exception as exc:
            failures[i] = ScoreFailure(entry.id, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_one, range(len(manifest.entries))))
    else:
        for i in range(len(manifest.entries)):
            _one(i)

    records = [results[i] for i in sorted(results.keys())]
    ordered_failures = [failures[i] for i in sorted(failures.keys())]
    return records, ordered_failures


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_codebook(path: str | Path, codebook: Codebook) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hist = np.asarray(codebook.inertia_history, dtype="<f8")
    with path.open("wb") as fh:
        fh.write(_CDBK_MAGIC)
        fh.write(struct.pack("<IIIqI", _CDBK_VERSION, codebook.k, codebook.dim,
                             codebook.seed, len(hist)))
        fh.write(hist.tobytes())
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
    return path


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _CDBK_MAGIC:
        raise UlmError(f"{path}: not a codebook file (bad magic)")
    version, k, dim, seed, n_hist = struct.unpack_from("<IIIqI", blob, 4)
    if version != _CDBK_VERSION:
        raise UlmError(f"{path}: unsupported codebook version {version}")
    offset = 4 + struct.calcsize("<IIIqI")
    hist = np.frombuffer(blob, dtype="<f8", count=n_hist, offset=offset)
    offset += 8 * n_hist
    centroids = np.frombuffer(blob, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim)
    return Codebook(centroids=centroids.copy(), seed=seed, inertia_history=tuple(hist))


def save_unit_lm(path: str | Path, lm: NgramLm) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    counts = {
        " ".join(str(u) for u in history): {str(u): c for u, c in sorted(table.items())}
        for history, table in sorted(lm.counts.items())
    }
    payload = {"order": lm.order, "k": lm.k, "alpha": lm.alpha, "counts": counts}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_unit_lm(path: str | Path) -> NgramLm:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    for hist_str, table in payload["counts"].items():
        history = tuple(int(u) for u in hist_str.split()) if hist_str else ()
        counts[history] = {int(u): int(c) for u, c in table.items()}
    return NgramLm(order=int(payload["order"]), k=int(payload["k"]),
                   alpha=float(payload["alpha"]), counts=counts)


def write_unit_sequences(path: str | Path, sequences: Sequence[UnitSequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(f"{seq.utterance_id}\t{' '.join(str(int(u)) for u in seq.units)}\n")
    return path


def read_unit_sequences(path: str | Path) -> list[UnitSequence]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise UlmError(f"{path}:{lineno}: expected 'id<TAB>units'")
        units = np.array([int(u) for u in parts[1].split()], dtype=np.int64)
        out.append(UnitSequence(utterance_id=parts[0], units=units))
    return out
