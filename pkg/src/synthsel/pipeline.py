"""Stage orchestration with content-hash caching.

Each stage hashes its config subset plus every input file into a
fingerprint. A stamp file under ``<out>/stamps`` records the
fingerprint and the hashes of the stage's outputs; re-running a stage
whose fingerprint and outputs are intact is a no-op. Artifacts that
carry JSON sidecars embed the producing fingerprint as ``config_hash``,
and consuming stages verify inputs against the producer's recorded
hashes, so hand-edited artifacts are detected instead of silently
reused.

Feature caching is content-addressed: cache filenames encode the audio
digest and the DSP settings, so stale cache entries cannot be read.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import analysis, dsp, net, plots, scorer, selection, ulm
from .config import PipelineConfig, config_fingerprint_dict, hash_dict
from .corpus import (Manifest, load_manifest, read_audio_bytes, save_manifest,
                     synthesize_toy_corpus)

STAGE_NAMES = ("toy-corpus", "featurize", "train-scorer", "score",
               "ulm-train", "ulm-score", "select", "fuse", "analyze")

_METHOD_TAGS = {"cls": scorer.CLS_XENT, "cos": scorer.COS_ARCFACE,
                "ulm_acc": scorer.ULM_ACC, "ulm_ppl": scorer.ULM_PPL,
                "confidence": scorer.CONFIDENCE}


class StageError(RuntimeError):
    """A stage failed or its prerequisites are missing."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class StageOutcome:
    stage: str
    cached: bool
    outputs: tuple[Path, ...]


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _audio_paths(manifest: Manifest) -> list[Path]:
    return [manifest.resolve_audio(e) for e in manifest.entries]


# ---------------------------------------------------------------------------
# Content-addressed feature loading
# ---------------------------------------------------------------------------

def _dsp_hash(cfg: PipelineConfig) -> str:
    from dataclasses import fields

    return hash_dict({f.name: getattr(cfg.dsp, f.name) for f in fields(dsp.DspConfig)})[:12]


def feature_loader(cfg: PipelineConfig, manifest: Manifest, kind: str,
                   write_missing: bool = False) -> Callable:
    """Loader keyed by (audio bytes, DSP settings); normalizes log-mel.

    Cache hits return the stored float32 features; misses compute from
    the audio (and persist when ``write_missing``). Either path yields
    identical values.
    """
    dsp_tag = _dsp_hash(cfg)
    cache_root = cfg.cache_dir / kind

    def _load(entry) -> dsp.FeatureMatrix:
        path = manifest.resolve_audio(entry)
        data = path.read_bytes()
        digest = hashlib.sha256(data).hexdigest()[:24]
        cpath = cache_root / f"{digest}-{dsp_tag}.fea"
        if cpath.is_file():
            feats = dsp.read_feature_cache(cpath)
        else:
            audio = read_audio_bytes(data, origin=str(path))
            feats = dsp.log_mel(audio, cfg.dsp) if kind == dsp.LOG_MEL else dsp.mfcc(audio, cfg.dsp)
            if write_missing:
                dsp.write_feature_cache(cpath, feats)
        if kind == dsp.LOG_MEL:
            feats = dsp.normalize_features(feats)
        return feats

    return _load


def _cache_path_for(cfg: PipelineConfig, manifest: Manifest, kind: str, entry) -> Path:
    digest = hashlib.sha256(manifest.resolve_audio(entry).read_bytes()).hexdigest()[:24]
    return cfg.cache_dir / kind / f"{digest}-{_dsp_hash(cfg)}.fea"


# ---------------------------------------------------------------------------
# Stamps
# ---------------------------------------------------------------------------

def _stamp_path(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.out_dir / "stamps" / (stage.replace(":", "_") + ".json")


def _load_stamps(cfg: PipelineConfig) -> dict[str, dict]:
    stamps = {}
    stamp_dir = cfg.out_dir / "stamps"
    if stamp_dir.is_dir():
        for p in sorted(stamp_dir.glob("*.json")):
            try:
                stamps[p.stem] = json.loads(p.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                continue
    return stamps


def _check_producers(cfg: PipelineConfig, stage: str, input_hashes: dict[str, str]) -> None:
    """Inputs produced by earlier stages must match their recorded hashes."""
    for stamp in _load_stamps(cfg).values():
        for rel, recorded in stamp.get("outputs", {}).items():
            actual = input_hashes.get(rel)
            if actual is not None and actual != recorded:
                raise StageError(stage, f"input {rel} was modified after stage "
                                        f"{stamp.get('stage')!r} produced it (hash mismatch)")


def _relpath(cfg: PipelineConfig, path: Path) -> str:
    try:
        return str(path.relative_to(cfg.out_dir))
    except ValueError:
        return str(path)


def _run_stage(cfg: PipelineConfig, stage: str, config_subset: dict,
               inputs: Sequence[Path], outputs_fn: Callable[[], Sequence[Path]],
               run_fn: Callable[[str], None]) -> StageOutcome:
    input_hashes: dict[str, str] = {}
    for p in inputs:
        if not Path(p).is_file():
            raise StageError(stage, f"required input missing: {p}")
        input_hashes[_relpath(cfg, Path(p))] = _sha256_file(Path(p))
    fingerprint = hash_dict({"stage": stage, "config": config_subset, "inputs": input_hashes})

    stamp_file = _stamp_path(cfg, stage)
    if stamp_file.is_file():
        try:
            stamp = json.loads(stamp_file.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            stamp = {}
        if stamp.get("fingerprint") == fingerprint:
            outs = {cfg.out_dir / rel: digest for rel, digest in stamp.get("outputs", {}).items()}
            if outs and all(p.is_file() and _sha256_file(p) == digest for p, digest in outs.items()):
                return StageOutcome(stage, cached=True, outputs=tuple(sorted(outs)))

    _check_producers(cfg, stage, input_hashes)
    run_fn(fingerprint)
    produced = [Path(p) for p in outputs_fn()]
    missing = [p for p in produced if not p.is_file()]
    if missing:
        raise StageError(stage, f"did not produce expected output {missing[0]}")
    out_hashes = {_relpath(cfg, p): _sha256_file(p) for p in produced}
    stamp_file.parent.mkdir(parents=True, exist_ok=True)
    stamp_file.write_text(json.dumps(
        {"stage": stage, "fingerprint": fingerprint, "outputs": out_hashes},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return StageOutcome(stage, cached=False, outputs=tuple(sorted(produced)))


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _require(stage: str, path: Path, hint: str) -> Path:
    if not path.is_file():
        raise StageError(stage, f"missing {path}; run {hint!r} first")
    return path


def _manifest(cfg: PipelineConfig, which: str, stage: str, hint: str = "toy-corpus") -> Manifest:
    return load_manifest(_require(stage, cfg.manifest_path(which), hint))


def _fingerprint_subset(cfg: PipelineConfig, *keys: str) -> dict:
    full = config_fingerprint_dict(cfg)
    return {k: full[k] for k in keys}


def stage_toy_corpus(cfg: PipelineConfig) -> StageOutcome:
    stage = "toy-corpus"
    spec = cfg.toy_spec()

    outputs: list[Path] = []

    def _run(fingerprint: str) -> None:
        toy = synthesize_toy_corpus(spec, cfg.out_dir)
        for which, man in (("corpus", toy.corpus), ("pool", toy.pool), ("eval", toy.eval_set)):
            if man is None:
                continue
            target = cfg.manifest_path(which)
            if target != cfg.out_dir / f"{which}.jsonl":
                save_manifest(man, target)
            outputs.append(target)
            outputs.extend(man.resolve_audio(e) for e in man.entries)

    def _outputs() -> list[Path]:
        return outputs

    return _run_stage(cfg, stage, _fingerprint_subset(cfg, "seed", "toy"), [], _outputs, _run)


def stage_featurize(cfg: PipelineConfig) -> StageOutcome:
    stage = "featurize"
    corpus = _manifest(cfg, "corpus", stage)
    pool = load_manifest(cfg.manifest_path("pool")) if cfg.manifest_path("pool").is_file() else None

    inputs = [cfg.manifest_path("corpus")] + _audio_paths(corpus)
    jobs: list[tuple[Manifest, str]] = [(corpus, dsp.LOG_MEL), (corpus, dsp.MFCC)]
    if pool is not None:
        inputs += [cfg.manifest_path("pool")] + _audio_paths(pool)
        jobs += [(pool, dsp.LOG_MEL), (pool, dsp.MFCC)]

    produced: list[Path] = []

    def _run(fingerprint: str) -> None:
        for man, kind in jobs:
            load = feature_loader(cfg, man, kind, write_missing=True)
            if cfg.threads > 1:
                with ThreadPoolExecutor(max_workers=cfg.threads) as tp:
                    list(tp.map(load, man.entries))
            else:
                for e in man.entries:
                    load(e)
            produced.extend(_cache_path_for(cfg, man, kind, e) for e in man.entries)

    def _outputs() -> list[Path]:
        return sorted(set(produced))

    return _run_stage(cfg, stage, _fingerprint_subset(cfg, "dsp"), inputs, _outputs, _run)


def stage_train_scorer(cfg: PipelineConfig, head: str) -> StageOutcome:
    stage = f"train-scorer:{head}"
    if head not in net.HEADS:
        raise StageError(stage, f"unknown head {head!r}")
    corpus = _manifest(cfg, "corpus", stage)
    inputs = [cfg.manifest_path("corpus")] + _audio_paths(corpus)
    ckpt = cfg.out_dir / "checkpoints" / f"{head}.ckpt"
    subset_keys = ("seed", "dsp", "net", "train") + (("arcface",) if head == net.ARCFACE else ())
    subset = _fingerprint_subset(cfg, *subset_keys)

    def _run(fingerprint: str) -> None:
        from .corpus import split_manifest

        train_man, dev_man = split_manifest(corpus, dev_fraction=0.25, seed=cfg.seed)
        load = feature_loader(cfg, corpus, dsp.LOG_MEL)
        result = net.train_scorer(
            train_man, dev_man, cfg.net_cfg(head), cfg.train_cfg(head),
            dsp_cfg=cfg.dsp, arcface_cfg=cfg.arcface if head == net.ARCFACE else None,
            feature_loader=load)
        meta = {
            "seed": cfg.seed,
            "head": head,
            "epochs": len(result.history),
            "best_epoch": result.best_epoch,
            "dev_uar": result.best_dev_uar,
            "history": result.history,
            "config_hash": fingerprint,
        }
        net.save_checkpoint(ckpt, result.model, metadata=meta)

    def _outputs() -> list[Path]:
        return [ckpt, ckpt.parent / (ckpt.name + ".json")]

    return _run_stage(cfg, stage, subset, inputs, _outputs, _run)


def stage_score(cfg: PipelineConfig, method: str) -> StageOutcome:
    stage = f"score:{method}"
    if method not in ("cls", "cos"):
        raise StageError(stage, "method must be 'cls' or 'cos'")
    head = net.BCE if method == "cls" else net.ARCFACE
    ckpt = _require(stage, cfg.out_dir / "checkpoints" / f"{head}.ckpt", f"train-scorer:{head}")
    pool = _manifest(cfg, "pool", stage)
    inputs = [ckpt, cfg.manifest_path("pool")] + _audio_paths(pool)
    corpus = None
    if method == "cos":
        corpus = _manifest(cfg, "corpus", stage)
        inputs += [cfg.manifest_path("corpus")] + _audio_paths(corpus)
    score_path = cfg.out_dir / "scores" / f"{method}.tsv"
    avg_path = cfg.out_dir / "embeddings" / "avg_real.json"

    def _run(fingerprint: str) -> None:
        model = net.load_checkpoint(ckpt)
        load = feature_loader(cfg, pool, dsp.LOG_MEL)
        if method == "cls":
            records, failures = scorer.score_corpus(
                model, pool, scorer.CLS_XENT, dsp_cfg=cfg.dsp,
                feature_loader=load, threads=cfg.threads)
        else:
            reals = corpus.with_label("real")
            avg = scorer.average_real_embedding(
                model, reals, dsp_cfg=cfg.dsp,
                feature_loader=feature_loader(cfg, corpus, dsp.LOG_MEL))
            scorer.write_average_embedding(avg_path, avg)
            records, failures = scorer.score_corpus(
                model, pool, scorer.COS_ARCFACE, dsp_cfg=cfg.dsp, avg=avg,
                feature_loader=load, threads=cfg.threads)
        if failures:
            for f in failures:
                print(f"warning: could not score {f.utterance_id}: {f.reason}")
        scorer.write_score_file(score_path, records)

    def _outputs() -> list[Path]:
        outs = [score_path]
        if method == "cos":
            outs.append(avg_path)
        return outs

    return _run_stage(cfg, stage, _fingerprint_subset(cfg, "dsp"), inputs, _outputs, _run)


def stage_ulm_train(cfg: PipelineConfig) -> StageOutcome:
    stage = "ulm-train"
    corpus = _manifest(cfg, "corpus", stage)
    reals = corpus.with_label("real")
    inputs = [cfg.manifest_path("corpus")] + _audio_paths(reals)
    cb_path = cfg.out_dir / "ulm" / "codebook.bin"
    lm_path = cfg.out_dir / "ulm" / "unit_lm.json"
    units_path = cfg.out_dir / "ulm" / "units_train.tsv"

    def _run(fingerprint: str) -> None:
        import numpy as np

        load = feature_loader(cfg, corpus, dsp.MFCC)
        feats = [(e.id, load(e)) for e in reals.entries]
        frames = np.concatenate([f.frames for _, f in feats], axis=0)
        codebook = ulm.train_codebook(frames, k=cfg.ulm.k, seed=cfg.seed)
        ulm.save_codebook(cb_path, codebook)
        sequences = [ulm.quantize(f, codebook, utterance_id=uid) for uid, f in feats]
        ulm.write_unit_sequences(units_path, sequences)
        lm = ulm.train_unit_lm(sequences, k=cfg.ulm.k, order=cfg.ulm.order, alpha=cfg.ulm.alpha)
        ulm.save_unit_lm(lm_path, lm)

    def _outputs() -> list[Path]:
        return [cb_path, lm_path, units_path]

    return _run_stage(cfg, stage, _fingerprint_subset(cfg, "seed", "dsp", "ulm"), inputs,
                      _outputs, _run)


def stage_ulm_score(cfg: PipelineConfig, metric: str) -> StageOutcome:
    stage = f"ulm-score:{metric}"
    if metric not in ("acc", "ppl"):
        raise StageError(stage, "metric must be 'acc' or 'ppl'")
    cb_path = _require(stage, cfg.out_dir / "ulm" / "codebook.bin", "ulm-train")
    lm_path = _require(stage, cfg.out_dir / "ulm" / "unit_lm.json", "ulm-train")
    pool = _manifest(cfg, "pool", stage)
    inputs = [cb_path, lm_path, cfg.manifest_path("pool")] + _audio_paths(pool)
    tag = scorer.ULM_ACC if metric == "acc" else scorer.ULM_PPL
    score_path = cfg.out_dir / "scores" / f"ulm_{metric}.tsv"
    units_path = cfg.out_dir / "ulm" / "units_pool.tsv"

    def _run(fingerprint: str) -> None:
        codebook = ulm.load_codebook(cb_path)
        lm = ulm.load_unit_lm(lm_path)
        load = feature_loader(cfg, pool, dsp.MFCC)
        records, failures = ulm.ulm_score_corpus(lm, codebook, pool, tag, dsp_cfg=cfg.dsp,
                                                 feature_loader=load, threads=cfg.threads)
        for f in failures:
            print(f"warning: could not score {f.utterance_id}: {f.reason}")
        scorer.write_score_file(score_path, records)
        sequences = [ulm.quantize(load(e), codebook, utterance_id=e.id) for e in pool.entries]
        ulm.write_unit_sequences(units_path, sequences)

    def _outputs() -> list[Path]:
        return [score_path, units_path]

    return _run_stage(cfg, stage, _fingerprint_subset(cfg, "dsp", "ulm"), inputs, _outputs, _run)


def stage_select(cfg: PipelineConfig, name: str, criterion_text: str | None = None) -> StageOutcome:
    stage = f"select:{name}"
    if name not in _METHOD_TAGS:
        raise StageError(stage, f"unknown score method {name!r}")
    text = criterion_text or getattr(cfg.select, name, "")
    if not text:
        raise StageError(stage, f"no criterion configured for {name!r} (set select.{name})")
    try:
        criterion = selection.parse_criterion(text, default_seed=cfg.seed)
    except selection.SelectionError as exc:
        raise StageError(stage, str(exc)) from exc
    score_path = _require(stage, cfg.out_dir / "scores" / f"{name}.tsv",
                          "score / ulm-score")
    corpus = _manifest(cfg, "corpus", stage)
    pool = _manifest(cfg, "pool", stage)
    inputs = [score_path, cfg.manifest_path("corpus"), cfg.manifest_path("pool")]
    sel_path = cfg.out_dir / "selections" / f"{name}.txt"
    aug_path = cfg.out_dir / "augmented" / f"{name}.jsonl"
    subset = {"criterion": criterion.describe(), "seed": cfg.seed}

    def _run(fingerprint: str) -> None:
        records = scorer.read_score_file(score_path)
        result = selection.select(records, criterion)
        selection.write_selection(sel_path, result, extra={"config_hash": fingerprint})
        augmented = selection.build_augmented_manifest(corpus.with_label("real"), pool, result)
        save_manifest(augmented, aug_path)

    def _outputs() -> list[Path]:
        return [sel_path, sel_path.parent / (sel_path.name + ".json"), aug_path]

    return _run_stage(cfg, stage, subset, inputs, _outputs, _run)


def stage_fuse(cfg: PipelineConfig) -> StageOutcome:
    stage = "fuse"
    names = [n.strip() for n in cfg.fuse_inputs.split(",") if n.strip()]
    if len(names) != 2:
        raise StageError(stage, f"fuse.inputs must name two selections, got {cfg.fuse_inputs!r}")
    sel_paths = [_require(stage, cfg.out_dir / "selections" / f"{n}.txt", f"select:{n}")
                 for n in names]
    corpus = _manifest(cfg, "corpus", stage)
    pool = _manifest(cfg, "pool", stage)
    inputs = sel_paths + [p.parent / (p.name + ".json") for p in sel_paths]
    inputs += [cfg.manifest_path("corpus"), cfg.manifest_path("pool")]
    fused_path = cfg.out_dir / "selections" / "fused.txt"
    aug_path = cfg.out_dir / "augmented" / "fused.jsonl"
    subset = {"fuse": cfg.fuse_inputs}

    def _run(fingerprint: str) -> None:
        a = selection.read_selection(sel_paths[0])
        b = selection.read_selection(sel_paths[1])
        fused = selection.fuse_intersection(a, b)
        selection.write_selection(fused_path, fused, extra={"config_hash": fingerprint})
        augmented = selection.build_augmented_manifest(corpus.with_label("real"), pool, fused)
        save_manifest(augmented, aug_path)

    def _outputs() -> list[Path]:
        return [fused_path, fused_path.parent / (fused_path.name + ".json"), aug_path]

    return _run_stage(cfg, stage, subset, inputs, _outputs, _run)


def stage_analyze(cfg: PipelineConfig) -> StageOutcome:
    stage = "analyze"
    name = cfg.analysis.score
    score_path = _require(stage, cfg.out_dir / "scores" / f"{name}.tsv",
                          "score / ulm-score")
    corpus = _manifest(cfg, "corpus", stage)
    pool = _manifest(cfg, "pool", stage)
    eval_path = cfg.manifest_path("eval")
    eval_man = load_manifest(eval_path) if eval_path.is_file() else None
    inputs = [score_path, cfg.manifest_path("corpus"), cfg.manifest_path("pool")]
    if eval_man is not None:
        inputs.append(eval_path)
    out = cfg.out_dir / "analysis"
    report_path = out / "report.json"
    hist_txt = out / "histogram.txt"
    ranges_tsv = out / "ranges.tsv"
    hist_png = out / "score_hist.png"
    counts_png = out / "range_counts.png"
    unseen_path = out / "unseen_words.json"
    subset = _fingerprint_subset(cfg, "analysis")

    def _parse_ranges(text: str) -> list[selection.SelectionRange]:
        ranges = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            low, _, high = part.partition(":")
            ranges.append(selection.SelectionRange(float(low), float(high)))
        return ranges

    def _run(fingerprint: str) -> None:
        records = scorer.read_score_file(score_path)
        ranges = _parse_ranges(cfg.analysis.ranges)
        report = analysis.selection_report(records, ranges)
        analysis.write_report_json(report_path, report, extra={"config_hash": fingerprint})
        hist_txt.write_text(analysis.render_histogram_text(report), encoding="utf-8")
        analysis.write_ranges_tsv(ranges_tsv, report)
        plots.render_score_histogram(report, hist_png)
        plots.render_range_counts(report, counts_png)
        train_vocab = analysis.vocabulary(corpus.with_label("real"), source="corpus:real")
        if eval_man is not None:
            unseen = analysis.unseen_words(train_vocab, eval_man, pool)
            count, ids = analysis.utterances_containing(pool, unseen.words)
            payload = {"unseen_words": list(unseen.words), "word_count": unseen.count,
                       "utterances_with_unseen": count, "utterance_ids": list(ids),
                       "config_hash": fingerprint}
        else:
            payload = {"unseen_words": [], "word_count": 0, "utterances_with_unseen": 0,
                       "utterance_ids": [], "note": "no eval manifest configured",
                       "config_hash": fingerprint}
        unseen_path.parent.mkdir(parents=True, exist_ok=True)
        unseen_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")

    def _outputs() -> list[Path]:
        return [report_path, hist_txt, ranges_tsv, hist_png, counts_png, unseen_path]

    return _run_stage(cfg, stage, subset, inputs, _outputs, _run)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

def default_plan(cfg: PipelineConfig) -> list[str]:
    """The full pipeline, honoring which selections are configured."""
    plan = ["toy-corpus", "featurize", "train-scorer:bce", "train-scorer:arcface",
            "score:cls", "score:cos", "ulm-train", "ulm-score:acc", "ulm-score:ppl"]
    for name in ("cls", "cos", "ulm_acc", "ulm_ppl", "confidence"):
        if getattr(cfg.select, name, ""):
            plan.append(f"select:{name}")
    fuse_names = [n.strip() for n in cfg.fuse_inputs.split(",") if n.strip()]
    if len(fuse_names) == 2 and all(getattr(cfg.select, n, "") for n in fuse_names):
        plan.append("fuse")
    plan.append("analyze")
    return plan


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str]) -> list[StageOutcome]:
    """Run the given stage specs in order; raises StageError on failure."""
    outcomes = []
    for spec in stages:
        name, _, variant = spec.partition(":")
        if name == "toy-corpus":
            outcomes.append(stage_toy_corpus(cfg))
        elif name == "featurize":
            outcomes.append(stage_featurize(cfg))
        elif name == "train-scorer":
            outcomes.append(stage_train_scorer(cfg, variant or net.BCE))
        elif name == "score":
            outcomes.append(stage_score(cfg, variant or "cls"))
        elif name == "ulm-train":
            outcomes.append(stage_ulm_train(cfg))
        elif name == "ulm-score":
            outcomes.append(stage_ulm_score(cfg, variant or "acc"))
        elif name == "select":
            outcomes.append(stage_select(cfg, variant or "cls"))
        elif name == "fuse":
            outcomes.append(stage_fuse(cfg))
        elif name == "analyze":
            outcomes.append(stage_analyze(cfg))
        else:
            raise StageError(spec, f"unknown stage (expected one of {STAGE_NAMES})")
    return outcomes
