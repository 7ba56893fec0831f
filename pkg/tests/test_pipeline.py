import json

import pytest

from synthsel.config import parse_config
from synthsel.pipeline import StageError, default_plan, run_pipeline, stage_select

TINY_CONFIG = """
seed = 11
toy.n_real = 6
toy.n_synthetic = 6
toy.n_pool = 8
toy.n_eval = 3
toy.min_duration_s = 1.0
toy.max_duration_s = 1.4
net.hidden = 16
net.embed_dim = 8
train.batch_size = 8
train.max_epochs = 2
train.patience = 0
train.lr_bce = 0.001
train.lr_arcface = 0.0005
ulm.k = 8
analysis.ranges = 0:0.2,0.2:0.5,0.5:1.01
"""


def _cfg(tmp_path, extra=""):
    path = tmp_path / "toy.cfg"
    path.write_text(TINY_CONFIG + f"paths.out_dir = {tmp_path / 'out'}\n" + extra)
    return parse_config(path)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = _cfg(tmp)
    outcomes = run_pipeline(cfg, default_plan(cfg))
    return cfg, outcomes


class TestFullRun:
    def test_all_stages_ran(self, full_run):
        cfg, outcomes = full_run
        assert [o.cached for o in outcomes] == [False] * len(outcomes)
        names = [o.stage for o in outcomes]
        assert names[0] == "toy-corpus"
        assert "train-scorer:bce" in names and "train-scorer:arcface" in names
        assert "fuse" in names and "analyze" in names

    def test_expected_artifacts_exist(self, full_run):
        cfg, _ = full_run
        out = cfg.out_dir
        expected = [
            "corpus.jsonl", "pool.jsonl", "eval.jsonl",
            "checkpoints/bce.ckpt", "checkpoints/bce.ckpt.json",
            "checkpoints/arcface.ckpt",
            "embeddings/avg_real.json",
            "scores/cls.tsv", "scores/cos.tsv",
            "scores/ulm_acc.tsv", "scores/ulm_ppl.tsv",
            "ulm/codebook.bin", "ulm/unit_lm.json",
            "selections/cls.txt", "selections/cls.txt.json",
            "selections/cos.txt", "selections/fused.txt",
            "augmented/cls.jsonl", "augmented/fused.jsonl",
            "analysis/report.json", "analysis/histogram.txt", "analysis/ranges.tsv",
            "analysis/score_hist.png", "analysis/range_counts.png",
            "analysis/unseen_words.json",
        ]
        for rel in expected:
            assert (out / rel).is_file(), f"missing {rel}"

    def test_score_files_cover_pool(self, full_run):
        cfg, _ = full_run
        from synthsel.corpus import load_manifest
        from synthsel.scorer import read_score_file

        pool = load_manifest(cfg.manifest_path("pool"))
        for name in ("cls", "cos", "ulm_acc", "ulm_ppl"):
            records = read_score_file(cfg.out_dir / "scores" / f"{name}.tsv")
            assert [r.utterance_id for r in records] == list(pool.ids())

    def test_sidecars_embed_config_hash(self, full_run):
        cfg, _ = full_run
        for rel in ("checkpoints/bce.ckpt.json", "selections/cls.txt.json",
                    "analysis/report.json"):
            meta = json.loads((cfg.out_dir / rel).read_text())
            assert len(meta["config_hash"]) == 64

    def test_second_run_fully_cached(self, full_run):
        cfg, _ = full_run
        before = {p: p.stat().st_mtime_ns for p in cfg.out_dir.rglob("*") if p.is_file()}
        outcomes = run_pipeline(cfg, default_plan(cfg))
        assert all(o.cached for o in outcomes)
        after = {p: p.stat().st_mtime_ns for p in cfg.out_dir.rglob("*") if p.is_file()}
        assert before == after  # zero recomputation, zero rewrites

    def test_augmented_manifest_structure(self, full_run):
        cfg, _ = full_run
        from synthsel.corpus import load_manifest
        from synthsel.selection import read_selection

        sel = read_selection(cfg.out_dir / "selections" / "cls.txt")
        aug = load_manifest(cfg.out_dir / "augmented" / "cls.jsonl")
        reals = load_manifest(cfg.manifest_path("corpus")).with_label("real")
        assert len(aug) == len(reals) + len(sel.ids)
        assert aug.ids()[:len(reals)] == reals.ids()

    def test_fusion_is_intersection_of_selections(self, full_run):
        cfg, _ = full_run
        from synthsel.selection import read_selection

        a = read_selection(cfg.out_dir / "selections" / "cls.txt")
        b = read_selection(cfg.out_dir / "selections" / "cos.txt")
        fused = read_selection(cfg.out_dir / "selections" / "fused.txt")
        assert set(fused.ids) == set(a.ids) & set(b.ids)
        assert len(fused.ids) <= min(len(a.ids), len(b.ids))

    def test_training_metadata_recorded(self, full_run):
        cfg, _ = full_run
        meta = json.loads((cfg.out_dir / "checkpoints" / "bce.ckpt.json").read_text())
        assert meta["seed"] == cfg.seed
        assert meta["epochs"] >= 1
        assert 0.0 <= meta["dev_uar"] <= 1.0


class TestDependencies:
    def test_score_before_train_errors(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_pipeline(cfg, ["toy-corpus"])
        with pytest.raises(StageError, match="train-scorer:bce"):
            run_pipeline(cfg, ["score:cls"])

    def test_ulm_score_before_train_errors(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_pipeline(cfg, ["toy-corpus"])
        with pytest.raises(StageError, match="ulm-train"):
            run_pipeline(cfg, ["ulm-score:acc"])

    def test_unknown_stage_rejected(self, tmp_path):
        cfg = _cfg(tmp_path)
        with pytest.raises(StageError, match="unknown stage"):
            run_pipeline(cfg, ["transmogrify"])

    def test_tampered_artifact_detected(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_pipeline(cfg, ["toy-corpus", "featurize", "train-scorer:bce", "score:cls"])
        score_file = cfg.out_dir / "scores" / "cls.tsv"
        score_file.write_text(score_file.read_text().replace("0.", "1."))
        with pytest.raises(StageError, match="hash mismatch"):
            run_pipeline(cfg, ["select:cls"])


class TestSelectStage:
    def test_explicit_criterion_override(self, tmp_path):
        cfg = _cfg(tmp_path)
        run_pipeline(cfg, ["toy-corpus", "featurize", "train-scorer:bce", "score:cls"])
        outcome = stage_select(cfg, "cls", criterion_text="top:0.5")
        meta = json.loads((cfg.out_dir / "selections" / "cls.txt.json").read_text())
        assert meta["criterion"] == "top:0.5"
        assert meta["selected_count"] == 4  # ceil(0.5 * 8)

    def test_unconfigured_selection_rejected(self, tmp_path):
        cfg = _cfg(tmp_path, extra="select.ulm_acc =\n")
        with pytest.raises(StageError, match="select.ulm_acc"):
            run_pipeline(cfg, ["select:ulm_acc"])
