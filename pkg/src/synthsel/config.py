"""Pipeline configuration: a flat, human-editable key-value file with
dotted sections. Unknown keys are rejected by name; an empty file
yields the full default configuration.

Example::

    seed = 7
    threads = 2
    paths.out_dir = runs/toy
    net.hidden = 256
    select.cls = range:0.2:0.5
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import ToyCorpusSpec
from .dsp import DspConfig
from .net import ArcfaceConfig, NetConfig, TrainConfig


class ConfigError(ValueError):
    """Unknown key, bad value, or violated invariant in a config file."""


@dataclass(frozen=True)
class UlmSettings:
    k: int = 100
    order: int = 3
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError("ulm.k must be >= 2")
        if self.order < 1:
            raise ConfigError("ulm.order must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("ulm.alpha must be positive")


@dataclass(frozen=True)
class PathSettings:
    out_dir: str = "out"
    cache_dir: str = ""       # default: <out_dir>/cache
    corpus_manifest: str = ""  # default: <out_dir>/corpus.jsonl
    pool_manifest: str = ""    # default: <out_dir>/pool.jsonl
    eval_manifest: str = ""    # default: <out_dir>/eval.jsonl


@dataclass(frozen=True)
class ToySettings:
    n_real: int = 200
    n_synthetic: int = 200
    n_pool: int = 120
    n_eval: int = 40
    min_duration_s: float = 2.0
    max_duration_s: float = 4.0
    sample_rate: int = 16000
    reserved_words: int = 10


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 64
    lr_bce: float = 1e-4
    lr_arcface: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 30
    patience: int = 5

    def __post_init__(self) -> None:
        if self.lr_bce <= 0 or self.lr_arcface <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")


@dataclass(frozen=True)
class SelectSettings:
    """Criterion strings per score method; empty string disables one."""

    cls: str = "range:0.2:0.5"
    cos: str = "range:0.2:0.8"
    ulm_acc: str = ""
    ulm_ppl: str = ""
    confidence: str = ""


@dataclass(frozen=True)
class AnalysisSettings:
    score: str = "cls"
    ranges: str = "0:0.2,0.2:0.5,0.5:1.01"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    threads: int = 1
    dsp: DspConfig = field(default_factory=DspConfig)
    net_hidden: int = 256
    net_embed_dim: int = 64
    train: TrainSettings = field(default_factory=TrainSettings)
    arcface: ArcfaceConfig = field(default_factory=ArcfaceConfig)
    ulm: UlmSettings = field(default_factory=UlmSettings)
    toy: ToySettings = field(default_factory=ToySettings)
    paths: PathSettings = field(default_factory=PathSettings)
    select: SelectSettings = field(default_factory=SelectSettings)
    fuse_inputs: str = "cls,cos"
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.net_hidden < 1 or self.net_embed_dim < 1:
            raise ConfigError("network dimensions must be >= 1")

    # -- derived accessors ---------------------------------------------------

    def net_cfg(self, head: str) -> NetConfig:
        return NetConfig(input_dim=self.dsp.n_mels, hidden=self.net_hidden,
                         embed_dim=self.net_embed_dim, head=head)

    def train_cfg(self, head: str) -> TrainConfig:
        lr = self.train.lr_bce if head == "bce" else self.train.lr_arcface
        return TrainConfig(batch_size=self.train.batch_size, lr=lr,
                           beta1=self.train.beta1, beta2=self.train.beta2,
                           eps=self.train.eps, max_epochs=self.train.max_epochs,
                           patience=self.train.patience, seed=self.seed)

    def toy_spec(self) -> ToyCorpusSpec:
        return ToyCorpusSpec(n_real=self.toy.n_real, n_synthetic=self.toy.n_synthetic,
                             n_pool=self.toy.n_pool, n_eval=self.toy.n_eval,
                             min_duration_s=self.toy.min_duration_s,
                             max_duration_s=self.toy.max_duration_s,
                             sample_rate=self.toy.sample_rate, seed=self.seed,
                             n_reserved_words=self.toy.reserved_words)

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    @property
    def cache_dir(self) -> Path:
        return Path(self.paths.cache_dir) if self.paths.cache_dir else self.out_dir / "cache"

    def manifest_path(self, which: str) -> Path:
        configured = getattr(self.paths, f"{which}_manifest")
        return Path(configured) if configured else self.out_dir / f"{which}.jsonl"


# key -> (section attribute or None, field name, caster)
def _schema() -> dict[str, tuple[str | None, str, type]]:
    schema: dict[str, tuple[str | None, str, type]] = {
        "seed": (None, "seed", int),
        "threads": (None, "threads", int),
        "net.hidden": (None, "net_hidden", int),
        "net.embed_dim": (None, "net_embed_dim", int),
        "fuse.inputs": (None, "fuse_inputs", str),
    }
    sections: dict[str, tuple[str, type]] = {
        "dsp": ("dsp", DspConfig),
        "train": ("train", TrainSettings),
        "arcface": ("arcface", ArcfaceConfig),
        "ulm": ("ulm", UlmSettings),
        "toy": ("toy", ToySettings),
        "paths": ("paths", PathSettings),
        "select": ("select", SelectSettings),
        "analysis": ("analysis", AnalysisSettings),
    }
    for prefix, (attr, cls) in sections.items():
        for f in fields(cls):
            if prefix == "arcface" and f.name == "n_classes":
                continue  # fixed two-class task
            caster = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}.get(f.type, str)
            if f.name == "fmax":  # float | None
                caster = float
            schema[f"{prefix}.{f.name}"] = (attr, f.name, caster)
    return schema


_SCHEMA = _schema()


def config_from_items(items: dict[str, str]) -> PipelineConfig:
    """Build a config from raw key -> string-value pairs (strict keys)."""
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {}
    for key, raw in items.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        attr, name, caster = _SCHEMA[key]
        try:
            if caster is int:
                value: object = int(raw)
            elif caster is float:
                value = float(raw)
            else:
                value = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
        if attr is None:
            top[name] = value
        else:
            sections.setdefault(attr, {})[name] = value

    kwargs: dict[str, object] = dict(top)
    section_classes = {
        "dsp": DspConfig, "train": TrainSettings, "arcface": ArcfaceConfig,
        "ulm": UlmSettings, "toy": ToySettings, "paths": PathSettings,
        "select": SelectSettings, "analysis": AnalysisSettings,
    }
    for attr, cls in section_classes.items():
        if attr in sections:
            try:
                kwargs[attr] = cls(**sections[attr])
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"invalid [{attr}] settings: {exc}") from exc
    try:
        return PipelineConfig(**kwargs)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path: str | Path | None) -> PipelineConfig:
    """Parse a config file; None or a missing-by-design empty file gives defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    items: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in items:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        items[key] = raw.strip()
    try:
        return config_from_items(items)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_with_overrides(cfg: PipelineConfig, seed: int | None = None,
                          threads: int | None = None, out_dir: str | None = None) -> PipelineConfig:
    """Apply command-line overrides on top of a parsed config."""
    import dataclasses

    changes: dict[str, object] = {}
    if seed is not None:
        changes["seed"] = seed
    if threads is not None:
        changes["threads"] = threads
    if out_dir is not None:
        changes["paths"] = dataclasses.replace(cfg.paths, out_dir=out_dir)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def config_fingerprint_dict(cfg: PipelineConfig) -> dict:
    """Canonical dict of everything that affects computed artifacts
    (paths and thread counts excluded)."""
    return {
        "seed": cfg.seed,
        "dsp": {f.name: getattr(cfg.dsp, f.name) for f in fields(DspConfig)},
        "net": {"hidden": cfg.net_hidden, "embed_dim": cfg.net_embed_dim},
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(TrainSettings)},
        "arcface": {"scale": cfg.arcface.scale, "margin": cfg.arcface.margin},
        "ulm": {f.name: getattr(cfg.ulm, f.name) for f in fields(UlmSettings)},
        "toy": {f.name: getattr(cfg.toy, f.name) for f in fields(ToySettings)},
        "select": {f.name: getattr(cfg.select, f.name) for f in fields(SelectSettings)},
        "fuse": cfg.fuse_inputs,
        "analysis": {f.name: getattr(cfg.analysis, f.name) for f in fields(AnalysisSettings)},
    }


def hash_dict(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
