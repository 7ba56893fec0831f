"""Per-utterance scoring with a trained model, and classifier evaluation.

Score files are UTF-8 TSV with a ``id<TAB>score<TAB>method`` header,
scores printed with 6 decimals, rows in manifest order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit as sigmoid

from .corpus import Manifest, read_audio
from .dsp import DspConfig, FeatureMatrix, log_mel, normalize_features
from .net import BCE, ARCFACE, ScorerModel, forward_embeddings

CLS_XENT = "cls_xent"
COS_ARCFACE = "cos_arcface"
ULM_ACC = "ulm_acc"
ULM_PPL = "ulm_ppl"
CONFIDENCE = "confidence"
EXTERNAL = "external"
METHODS = (CLS_XENT, COS_ARCFACE, ULM_ACC, ULM_PPL, CONFIDENCE, EXTERNAL)


class ScoreError(ValueError):
    """Invalid score data or mismatched scoring method."""


@dataclass(frozen=True)
class ScoreRecord:
    utterance_id: str
    score: float
    method: str

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ScoreError(f"unknown scoring method {self.method!r}")
        if not np.isfinite(self.score):
            raise ScoreError(f"non-finite score for {self.utterance_id!r}")
        if self.method == CLS_XENT and not 0.0 <= self.score <= 1.0:
            raise ScoreError(f"{CLS_XENT} score must lie in [0, 1], got {self.score}")
        if self.method == COS_ARCFACE and not -1.0 <= self.score <= 1.0:
            raise ScoreError(f"{COS_ARCFACE} score must lie in [-1, 1], got {self.score}")


@dataclass(frozen=True)
class ScoreFailure:
    utterance_id: str
    reason: str


@dataclass(frozen=True)
class AverageRealEmbedding:
    """Unit-norm mean of normalized real-speech embeddings."""

    vector: np.ndarray
    n_source: int

    def __post_init__(self) -> None:
        if self.n_source < 1:
            raise ValueError("n_source must be >= 1")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"average embedding must be unit-norm, got |v| = {norm}")


def classification_score(model: ScorerModel, features: FeatureMatrix) -> float:
    """Real-class softmax component: 1 / (1 + exp(z0 - z1))."""
    if model.head != BCE:
        raise ScoreError(f"classification_score needs a {BCE}-head model, got {model.head}")
    emb = forward_embeddings(model, [features])
    return float(_cls_scores(model, emb)[0])


def _cls_scores(model: ScorerModel, emb: np.ndarray) -> np.ndarray:
    logits = emb @ model.params["head.w"].T + model.params["head.b"]
    return sigmoid(logits[:, 1].astype(np.float64) - logits[:, 0].astype(np.float64))


def average_real_embedding(model: ScorerModel, reals: Manifest,
                           dsp_cfg: DspConfig = DspConfig(),
                           feature_loader: Callable | None = None,
                           batch_size: int = 64) -> AverageRealEmbedding:
    """Normalize each real utterance's embedding, average, normalize again."""
    if model.head != ARCFACE:
        raise ScoreError(f"average_real_embedding needs an {ARCFACE}-head model, got {model.head}")
    entries = [e for e in reals.entries if e.label == "real"]
    if not entries:
        raise ScoreError("no real utterances to average")
    load = feature_loader or _default_loader(reals, dsp_cfg)
    feats = [load(e) for e in entries]
    order = sorted(range(len(feats)), key=lambda i: feats[i].n_frames)
    total = np.zeros(model.cfg.embed_dim, dtype=np.float64)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        emb = forward_embeddings(model, [feats[i] for i in idx]).astype(np.float64)
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ScoreError("zero-norm embedding among real utterances")
        total += (emb / norms).sum(axis=0)
    mean = total / len(entries)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ScoreError("real embeddings cancel out; average has zero norm")
    return AverageRealEmbedding(vector=mean / norm, n_source=len(entries))


def similarity_score(model: ScorerModel, features: FeatureMatrix,
                     avg: AverageRealEmbedding) -> float:
    """Cosine between the utterance embedding and the average real embedding."""
    if model.head != ARCFACE:
        raise ScoreError(f"similarity_score needs an {ARCFACE}-head model, got {model.head}")
    emb = forward_embeddings(model, [features]).astype(np.float64)[0]
    norm = np.linalg.norm(emb)
    if norm < 1e-12:
        raise ScoreError("zero-norm utterance embedding")
    return float(np.clip(emb @ avg.vector / norm, -1.0, 1.0))


def _default_loader(manifest: Manifest, dsp_cfg: DspConfig) -> Callable:
    def _load(entry) -> FeatureMatrix:
        return normalize_features(log_mel(read_audio(manifest.resolve_audio(entry)), dsp_cfg))
    return _load


def score_corpus(model: ScorerModel, manifest: Manifest, method: str,
                 dsp_cfg: DspConfig = DspConfig(),
                 avg: AverageRealEmbedding | None = None,
                 feature_loader: Callable | None = None,
                 threads: int = 1, batch_size: int = 64
                 ) -> tuple[list[ScoreRecord], list[ScoreFailure]]:
    """Score every manifest entry; output order follows the manifest.

    Per-utterance failures are collected and reported, not fatal. Batch
    composition is fixed by the manifest (length-bucketed), so results
    are byte-identical for any thread count.
    """
    if method == CLS_XENT:
        if model.head != BCE:
            raise ScoreError(f"{method} scoring needs a {BCE}-head model")
    elif method == COS_ARCFACE:
        if model.head != ARCFACE:
            raise ScoreError(f"{method} scoring needs an {ARCFACE}-head model")
        if avg is None:
            raise ScoreError(f"{method} scoring needs an average real embedding")
    else:
        raise ScoreError(f"score_corpus computes {CLS_XENT} or {COS_ARCFACE}, not {method!r}")

    load = feature_loader or _default_loader(manifest, dsp_cfg)
    entries = manifest.entries
    feats: dict[int, FeatureMatrix] = {}
    failures: dict[int, ScoreFailure] = {}

    def _extract(i: int) -> None:
        try:
            feats[i] = load(entries[i])
        except Exception as exc:  # per-utterance failure contract
            failures[i] = ScoreFailure(entries[i].id, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_extract, range(len(entries))))
    else:
        for i in range(len(entries)):
            _extract(i)

    ok = sorted(feats.keys())
    ok.sort(key=lambda i: feats[i].n_frames, reverse=True)
    batches = [ok[s:s + batch_size] for s in range(0, len(ok), batch_size)]
    scores: dict[int, float] = {}

    def _score_batch(idx: list[int]) -> list[tuple[int, float]]:
        emb = forward_embeddings(model, [feats[i] for i in idx])
        out: list[tuple[int, float]] = []
        if method == CLS_XENT:
            vals = _cls_scores(model, emb)
            for j, i in enumerate(idx):
                out.append((i, float(vals[j])))
        else:
            emb64 = emb.astype(np.float64)
            norms = np.linalg.norm(emb64, axis=1)
            for j, i in enumerate(idx):
                if norms[j] < 1e-12:
                    failures[i] = ScoreFailure(entries[i].id, "zero-norm embedding")
                else:
                    out.append((i, float(np.clip(emb64[j] @ avg.vector / norms[j], -1.0, 1.0))))
        return out

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for result in pool.map(_score_batch, batches):
                for i, s in result:
                    scores[i] = s
    else:
        for b in batches:
            for i, s in _score_batch(b):
                scores[i] = s

    records = [ScoreRecord(entries[i].id, scores[i], method)
               for i in range(len(entries)) if i in scores]
    ordered_failures = [failures[i] for i in sorted(failures.keys())]
    return records, ordered_failures


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UarReport:
    real_recall: float
    synthetic_recall: float
    uar: float
    n_real: int
    n_synthetic: int


def evaluate_uar(records: Sequence[ScoreRecord], truth: Manifest) -> UarReport:
    """Recall per class plus their unweighted mean; predicted real <=> score > 0.5."""
    by_id = truth.by_id()
    hits = {"real": 0, "synthetic": 0}
    totals = {"real": 0, "synthetic": 0}
    for rec in records:
        entry = by_id.get(rec.utterance_id)
        if entry is None:
            raise ScoreError(f"scored id {rec.utterance_id!r} not present in truth manifest")
        predicted = "real" if rec.score > 0.5 else "synthetic"
        totals[entry.label] += 1
        if predicted == entry.label:
            hits[entry.label] += 1
    for label, n in totals.items():
        if n == 0:
            raise ScoreError(f"no scored utterances with label {label!r}")
    real_recall = hits["real"] / totals["real"]
    synth_recall = hits["synthetic"] / totals["synthetic"]
    return UarReport(real_recall=real_recall, synthetic_recall=synth_recall,
                     uar=(real_recall + synth_recall) / 2.0,
                     n_real=totals["real"], n_synthetic=totals["synthetic"])


# ---------------------------------------------------------------------------
# Score file I/O
# ---------------------------------------------------------------------------

def write_score_file(path: str | Path, records: Sequence[ScoreRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tscore\tmethod\n")
        for rec in records:
            fh.write(f"{rec.utterance_id}\t{rec.score:.6f}\t{rec.method}\n")
    return path


def read_score_file(path: str | Path) -> list[ScoreRecord]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "id\tscore\tmethod":
        raise ScoreError(f"{path}: missing or bad header line")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ScoreError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            records.append(ScoreRecord(parts[0], float(parts[1]), parts[2]))
        except (ValueError, ScoreError) as exc:
            raise ScoreError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_average_embedding(path: str | Path, avg: AverageRealEmbedding,
                            extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"vector": [float(v) for v in avg.vector], "n_source": avg.n_source}
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_average_embedding(path: str | Path) -> AverageRealEmbedding:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return AverageRealEmbedding(vector=np.array(payload["vector"], dtype=np.float64),
                                n_source=int(payload["n_source"]))
