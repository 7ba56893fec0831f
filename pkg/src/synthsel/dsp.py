"""Signal-processing front end: STFT, 80-band log-Mel, and MFCC features.

Conventions: periodic Hann window, magnitude-squared spectra into
triangular HTK-mel filters, orthonormal DCT-II for cepstra. Internal
math runs in float64; FeatureMatrix frames are stored as float32 (the
cache format below is float32, so this keeps in-memory and cached
features byte-for-byte interchangeable).

Feature cache files: ``b"FEA1"``, kind byte (0 = log_mel, 1 = mfcc),
then T, D as uint32-LE, hop_ms as float32-LE, then T*D row-major
float32-LE values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft

from .corpus import AudioBuffer

LOG_MEL = "log_mel"
MFCC = "mfcc"
_KIND_CODES = {LOG_MEL: 0, MFCC: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

_CACHE_MAGIC = b"FEA1"
_CACHE_HEADER = struct.Struct("<4sBIIf")


@dataclass(frozen=True)
class DspConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 80
    n_mfcc: int = 13
    fmin: float = 0.0
    fmax: float | None = None  # None means sample_rate / 2
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.window_ms <= 0 or self.hop_ms <= 0:
            raise ValueError("window_ms and hop_ms must be positive")
        if self.n_mfcc > self.n_mels:
            raise ValueError(f"n_mfcc ({self.n_mfcc}) must not exceed n_mels ({self.n_mels})")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")

    def window_samples(self, sample_rate: int) -> int:
        n = int(round(self.window_ms * sample_rate / 1000.0))
        if self.fft_size < n:
            raise ValueError(f"fft_size ({self.fft_size}) smaller than window ({n} samples)")
        return n

    def hop_samples(self, sample_rate: int) -> int:
        return max(1, int(round(self.hop_ms * sample_rate / 1000.0)))

    def effective_fmax(self, sample_rate: int) -> float:
        return sample_rate / 2.0 if self.fmax is None else self.fmax


@dataclass(frozen=True)
class FeatureMatrix:
    """Time-major frames (T x D) with frame-rate metadata."""

    frames: np.ndarray
    frame_hop_ms: float
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in _KIND_CODES:
            raise ValueError(f"kind must be one of {tuple(_KIND_CODES)}, got {self.kind!r}")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a T x D matrix with T >= 1, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    """Number of full analysis frames: 1 + floor((N - window) / hop)."""
    if n_samples < window:
        raise ValueError(f"signal of {n_samples} samples is shorter than one window ({window})")
    return 1 + (n_samples - window) // hop


@lru_cache(maxsize=8)
def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, cfg: DspConfig) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, fft_size // 2 + 1)."""
    fmax = cfg.effective_fmax(sample_rate)
    if not (0 <= cfg.fmin < fmax <= sample_rate / 2.0):
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got [{cfg.fmin}, {fmax}]")
    n_bins = cfg.fft_size // 2 + 1
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(fmax), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_hz = np.arange(n_bins) * sample_rate / cfg.fft_size
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def stft(audio: AudioBuffer, cfg: DspConfig = DspConfig()) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, shape (T, fft_size//2 + 1)."""
    x = np.asarray(audio.samples, dtype=np.float64)
    win = cfg.window_samples(audio.sample_rate)
    hop = cfg.hop_samples(audio.sample_rate)
    n_frames = frame_count(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[:: hop][:n_frames]
    windowed = frames * _hann_periodic(win)
    return np.abs(np.fft.rfft(windowed, n=cfg.fft_size, axis=1))


def log_mel(audio: AudioBuffer, cfg: DspConfig = DspConfig()) -> FeatureMatrix:
    """Natural-log mel energies: ln(max(filterbank @ magnitude^2, floor))."""
    mag = stft(audio, cfg)
    fb = mel_filterbank(audio.sample_rate, cfg)
    energies = (mag ** 2) @ fb.T
    values = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureMatrix(values.astype(np.float32), cfg.hop_ms, LOG_MEL)


def mfcc(audio: AudioBuffer, cfg: DspConfig = DspConfig()) -> FeatureMatrix:
    """First n_mfcc orthonormal DCT-II coefficients of the log-mel frames."""
    mag = stft(audio, cfg)
    fb = mel_filterbank(audio.sample_rate, cfg)
    energies = (mag ** 2) @ fb.T
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    coeffs = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    return FeatureMatrix(np.ascontiguousarray(coeffs, dtype=np.float32), cfg.hop_ms, MFCC)


def normalize_features(features: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-dimension standardization.

    Dimensions with variance <= 1e-12 are only centered (left at zero).
    """
    x = features.frames
    mean = x.mean(axis=0, dtype=np.float64)
    var = x.var(axis=0, dtype=np.float64)
    scale = np.where(var > 1e-12, 1.0 / np.sqrt(np.where(var > 1e-12, var, 1.0)), 1.0)
    out = ((x.astype(np.float64) - mean) * scale).astype(x.dtype)
    return FeatureMatrix(out, features.frame_hop_ms, features.kind)


def write_feature_cache(path: str | Path, features: FeatureMatrix) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t, d = features.frames.shape
    header = _CACHE_HEADER.pack(_CACHE_MAGIC, _KIND_CODES[features.kind], t, d, features.frame_hop_ms)
    data = np.ascontiguousarray(features.frames, dtype="<f4").tobytes()
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(data)
    return path


def read_feature_cache(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _CACHE_HEADER.size:
        raise ValueError(f"{path}: truncated feature cache header")
    magic, kind_code, t, d, hop = _CACHE_HEADER.unpack_from(blob)
    if magic != _CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if kind_code not in _KIND_NAMES:
        raise ValueError(f"{path}: unknown feature kind code {kind_code}")
    expected = _CACHE_HEADER.size + 4 * t * d
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    frames = np.frombuffer(blob, dtype="<f4", offset=_CACHE_HEADER.size).reshape(t, d).copy()
    return FeatureMatrix(frames, hop, _KIND_NAMES[kind_code])
