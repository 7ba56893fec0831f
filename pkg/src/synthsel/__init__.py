"""synthsel: score synthetic (TTS) speech by similarity to real speech and
select mid-scoring subsets as supplementary ASR training data."""

from .corpus import (AudioBuffer, Manifest, ToyCorpusSpec, UtteranceEntry,
                     load_manifest, read_audio, save_manifest, synthesize_toy_corpus)
from .dsp import DspConfig, FeatureMatrix, log_mel, mfcc, normalize_features, stft
from .net import (ArcfaceConfig, NetConfig, ScorerModel, TrainConfig, compute_loss,
                  forward_embedding, grad_check, train_scorer)
from .scorer import (AverageRealEmbedding, ScoreRecord, average_real_embedding,
                     classification_score, evaluate_uar, score_corpus, similarity_score)
from .selection import (SelectionRange, SelectionResult, build_augmented_manifest,
                        fuse_intersection, select)
from .ulm import Codebook, NgramLm, UnitSequence, quantize, train_codebook, train_unit_lm
from .analysis import selection_report, unseen_words, utterances_containing, vocabulary

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "Manifest", "ToyCorpusSpec", "UtteranceEntry",
    "load_manifest", "read_audio", "save_manifest", "synthesize_toy_corpus",
    "DspConfig", "FeatureMatrix", "log_mel", "mfcc", "normalize_features", "stft",
    "ArcfaceConfig", "NetConfig", "ScorerModel", "TrainConfig", "compute_loss",
    "forward_embedding", "grad_check", "train_scorer",
    "AverageRealEmbedding", "ScoreRecord", "average_real_embedding",
    "classification_score", "evaluate_uar", "score_corpus", "similarity_score",
    "SelectionRange", "SelectionResult", "build_augmented_manifest",
    "fuse_intersection", "select",
    "Codebook", "NgramLm", "UnitSequence", "quantize", "train_codebook", "train_unit_lm",
    "selection_report", "unseen_words", "utterances_containing", "vocabulary",
    "__version__",
]
