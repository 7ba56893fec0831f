"""Utterance manifests, 16-bit PCM WAV I/O, and the toy-corpus generator.

Manifests are UTF-8 JSON-lines files, one object per utterance:
``{"id": str, "audio": str, "text": str, "label": "real"|"synthetic"}``.
Relative audio paths are resolved against the directory the manifest was
loaded from.

The toy generator stands in for real and TTS speech at desk scale. It
produces two acoustically well-separated classes so that a classifier
trained on them has a fighting chance:

* ``real``:   harmonic tone complexes with per-utterance pitch, vibrato,
              amplitude modulation and a low-level noise floor
              (spectral centroid a few hundred Hz);
* ``synthetic``: band-limited pulse-train buzz with flat pitch and flat
              amplitude (spectral centroid in the kHz range).
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .wordlist import common_words, reserved_words

REAL = "real"
SYNTHETIC = "synthetic"
LABELS = (REAL, SYNTHETIC)

DEFAULT_SAMPLE_RATE = 16000


class ManifestError(ValueError):
    """Malformed or inconsistent manifest data."""


class AudioFormatError(ValueError):
    """WAV file is not mono 16-bit linear PCM, or is truncated."""


@dataclass(frozen=True)
class UtteranceEntry:
    """One catalogued utterance."""

    id: str
    audio: str
    text: str
    label: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ManifestError("utterance id must be nonempty")
        if self.label not in LABELS:
            raise ManifestError(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass(frozen=True)
class Manifest:
    """Ordered, duplicate-free collection of utterance entries.

    ``root`` records where the manifest was loaded from (for resolving
    relative audio paths) and does not take part in equality.
    """

    entries: tuple[UtteranceEntry, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate utterance id {e.id!r}")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[UtteranceEntry]:
        return iter(self.entries)

    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.entries)

    def with_label(self, label: str) -> "Manifest":
        """Sub-manifest of entries carrying `label`, order preserved."""
        if label not in LABELS:
            raise ManifestError(f"unknown label {label!r}")
        return Manifest(tuple(e for e in self.entries if e.label == label), root=self.root)

    def by_id(self) -> dict[str, UtteranceEntry]:
        return {e.id: e for e in self.entries}

    def resolve_audio(self, entry: UtteranceEntry) -> Path:
        p = Path(entry.audio)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSON-lines manifest. Blank lines are skipped.

    Raises ManifestError with the 1-based line number for malformed
    lines, and for duplicate ids.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: list[UtteranceEntry] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = {"id", "audio", "text", "label"} - obj.keys()
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            try:
                entries.append(
                    UtteranceEntry(
                        id=str(obj["id"]),
                        audio=str(obj["audio"]),
                        text=str(obj["text"]),
                        label=str(obj["label"]),
                    )
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    try:
        return Manifest(tuple(entries), root=path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write a manifest as JSON-lines; inverse of load_manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(
                json.dumps(
                    {"id": e.id, "audio": e.audio, "text": e.text, "label": e.label},
                    ensure_ascii=False,
                )
                + "\n"
            )
    return path


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio, amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def read_audio_bytes(data: bytes, origin: str = "<bytes>") -> AudioBuffer:
    """Decode a mono 16-bit PCM WAV from memory; amplitudes scaled by 1/32768."""
    import io

    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioFormatError(f"{origin}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise AudioFormatError(f"{origin}: expected 16-bit samples, got {8 * wf.getsampwidth()}-bit")
            if wf.getcomptype() != "NONE":
                raise AudioFormatError(f"{origin}: expected linear PCM, got {wf.getcomptype()}")
            n = wf.getnframes()
            rate = wf.getframerate()
            raw = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{origin}: not a readable WAV file ({exc})") from exc
    if len(raw) != 2 * n:
        raise AudioFormatError(f"{origin}: truncated data chunk ({len(raw)} bytes for {n} frames)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples=samples, sample_rate=rate)


def read_audio(path: str | Path) -> AudioBuffer:
    """Read a mono 16-bit PCM WAV file; see read_audio_bytes."""
    path = Path(path)
    return read_audio_bytes(path.read_bytes(), origin=str(path))


def write_audio(path: str | Path, audio: AudioBuffer) -> Path:
    """Write mono 16-bit PCM WAV (amplitudes clipped to [-1, 1])."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.rint(np.asarray(audio.samples, dtype=np.float64) * 32767.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())
    return path


# ---------------------------------------------------------------------------
# Toy corpus generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyCorpusSpec:
    """Counts, durations, and seed for the deterministic toy corpus.

    ``n_pool`` synthetic utterances form a separate scoring pool whose
    transcripts may use the reserved word tail; ``n_eval`` real-class
    utterances form a separate evaluation manifest, each guaranteed to
    contain at least one reserved word.
    """

    n_real: int
    n_synthetic: int
    n_pool: int = 0
    n_eval: int = 0
    min_duration_s: float = 2.0
    max_duration_s: float = 4.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    seed: int = 0
    n_reserved_words: int = 10

    def __post_init__(self) -> None:
        if self.n_real < 1 or self.n_synthetic < 1:
            raise ValueError("need at least one utterance per class")
        if self.n_pool < 0 or self.n_eval < 0:
            raise ValueError("n_pool and n_eval must be non-negative")
        if not (1.0 <= self.min_duration_s <= self.max_duration_s <= 10.0):
            raise ValueError("durations must satisfy 1 s <= min <= max <= 10 s")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        # reserved words only matter when a pool or eval set is requested
        reserved_words(self.n_reserved_words)


@dataclass(frozen=True)
class ToyCorpus:
    """Manifests written by synthesize_toy_corpus."""

    corpus: Manifest
    pool: Manifest | None
    eval_set: Manifest | None


# role codes keep per-utterance RNG streams independent of the other roles
_ROLE_REAL, _ROLE_SYNTH, _ROLE_POOL, _ROLE_EVAL = 0, 1, 2, 3


def _utt_rng(seed: int, role: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, role, index]))


def _real_signal(rng: np.random.Generator, duration_s: float, sr: int) -> np.ndarray:
    """Harmonic complex: jittered pitch, vibrato, AM envelope, noise floor."""
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(110.0, 200.0)
    vib_rate = rng.uniform(4.0, 7.0)
    vib_depth = rng.uniform(0.005, 0.02)
    drift = rng.uniform(-0.02, 0.02)
    inst_f0 = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t) + drift * t / duration_s)
    phase = 2 * np.pi * np.cumsum(inst_f0) / sr
    sig = np.zeros(n)
    for k in range(1, 13):
        sig += (1.0 / k) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    am_rate = rng.uniform(0.5, 1.5)
    envelope = 1.0 + 0.2 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    edge = max(1, int(0.02 * sr))
    envelope[:edge] *= np.linspace(0.0, 1.0, edge)
    envelope[-edge:] *= np.linspace(1.0, 0.0, edge)
    sig *= envelope
    sig += rng.normal(0.0, 0.004, size=n)
    peak = np.max(np.abs(sig))
    return sig * (rng.uniform(0.4, 0.7) / peak)


def _synthetic_signal(rng: np.random.Generator, duration_s: float, sr: int) -> np.ndarray:
    """Band-limited pulse-train buzz: flat pitch, flat amplitude."""
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    f0 = rng.uniform(125.0, 135.0)
    lo, hi = 300.0, 6500.0
    k_lo = int(np.ceil(lo / f0))
    k_hi = int(np.floor(hi / f0))
    sig = np.zeros(n)
    for k in range(k_lo, k_hi + 1):
        sig += np.cos(2 * np.pi * k * f0 * t)
    edge = max(1, int(0.01 * sr))
    sig[:edge] *= np.linspace(0.0, 1.0, edge)
    sig[-edge:] *= np.linspace(1.0, 0.0, edge)
    peak = np.max(np.abs(sig))
    return sig * (0.5 / peak)


def _transcript(rng: np.random.Generator, words: tuple[str, ...],
                must_include: tuple[str, ...] = ()) -> str:
    n_words = int(rng.integers(3, 9))
    chosen = [words[int(i)] for i in rng.integers(0, len(words), size=n_words)]
    if must_include:
        word = must_include[int(rng.integers(0, len(must_include)))]
        chosen[int(rng.integers(0, len(chosen)))] = word
    return " ".join(chosen)


def synthesize_toy_corpus(spec: ToyCorpusSpec, out_dir: str | Path) -> ToyCorpus:
    """Generate WAVs and manifests under `out_dir`; pure in (spec, seed).

    Writes ``corpus.jsonl`` (n_real + n_synthetic entries, in that
    order), and ``pool.jsonl`` / ``eval.jsonl`` when requested. Audio
    files land in ``out_dir/audio``. Running twice with the same spec
    produces byte-identical files.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    try:
        audio_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {audio_dir}: {exc}") from exc

    common = common_words(spec.n_reserved_words)
    reserved = reserved_words(spec.n_reserved_words)
    full = common + reserved

    def _make(role: int, prefix: str, count: int, label: str) -> list[UtteranceEntry]:
        entries = []
        for i in range(count):
            rng = _utt_rng(spec.seed, role, i)
            dur = rng.uniform(spec.min_duration_s, spec.max_duration_s)
            if label == REAL:
                sig = _real_signal(rng, dur, spec.sample_rate)
            else:
                sig = _synthetic_signal(rng, dur, spec.sample_rate)
            if role == _ROLE_POOL:
                include = reserved if (reserved and rng.random() < 0.5) else ()
                text = _transcript(rng, full, include)
            elif role == _ROLE_EVAL:
                text = _transcript(rng, full, reserved)
            else:
                text = _transcript(rng, common)
            utt_id = f"{prefix}_{i:04d}"
            rel = f"audio/{utt_id}.wav"
            write_audio(out_dir / rel, AudioBuffer(sig, spec.sample_rate))
            entries.append(UtteranceEntry(id=utt_id, audio=rel, text=text, label=label))
        return entries

    corpus_entries = _make(_ROLE_REAL, "real", spec.n_real, REAL)
    corpus_entries += _make(_ROLE_SYNTH, "synth", spec.n_synthetic, SYNTHETIC)
    corpus = Manifest(tuple(corpus_entries), root=out_dir)
    save_manifest(corpus, out_dir / "corpus.jsonl")

    pool = None
    if spec.n_pool:
        pool = Manifest(tuple(_make(_ROLE_POOL, "pool", spec.n_pool, SYNTHETIC)), root=out_dir)
        save_manifest(pool, out_dir / "pool.jsonl")
    eval_set = None
    if spec.n_eval:
        eval_set = Manifest(tuple(_make(_ROLE_EVAL, "eval", spec.n_eval, REAL)), root=out_dir)
        save_manifest(eval_set, out_dir / "eval.jsonl")
    return ToyCorpus(corpus=corpus, pool=pool, eval_set=eval_set)


def split_manifest(manifest: Manifest, dev_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Seeded stratified train/dev split; per-label proportions preserved.

    Entry order within each part follows the original manifest.
    """
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError(f"dev_fraction must be in (0, 1), got {dev_fraction}")
    rng = np.random.default_rng(seed)
    dev_idx: set[int] = set()
    for label in LABELS:
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        if not idx:
            continue
        n_dev = max(1, int(round(dev_fraction * len(idx))))
        chosen = rng.choice(len(idx), size=min(n_dev, len(idx)), replace=False)
        dev_idx.update(idx[int(c)] for c in chosen)
    train = tuple(e for i, e in enumerate(manifest.entries) if i not in dev_idx)
    dev = tuple(e for i, e in enumerate(manifest.entries) if i in dev_idx)
    return (Manifest(train, root=manifest.root), Manifest(dev, root=manifest.root))
