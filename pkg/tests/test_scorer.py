import numpy as np
import pytest

from synthsel.corpus import (AudioBuffer, Manifest, ToyCorpusSpec, UtteranceEntry,
                             synthesize_toy_corpus, write_audio)
from synthsel.dsp import DspConfig, FeatureMatrix
from synthsel.net import ArcfaceConfig, NetConfig, init_model
from synthsel.scorer import (AverageRealEmbedding, ScoreError, ScoreRecord,
                             average_real_embedding, classification_score,
                             evaluate_uar, read_average_embedding, read_score_file,
                             score_corpus, similarity_score, write_average_embedding,
                             write_score_file)

CFG = DspConfig()


def _fm(frames):
    return FeatureMatrix(np.asarray(frames, dtype=np.float32), 10.0, "log_mel")


def _bce_model(seed=0):
    return init_model(NetConfig(input_dim=8, hidden=8, embed_dim=4, head="bce"), seed=seed,
                      dtype=np.float64)


def _arc_model(seed=0):
    return init_model(NetConfig(input_dim=8, hidden=8, embed_dim=4, head="arcface"),
                      seed=seed, arcface_cfg=ArcfaceConfig(), dtype=np.float64)


class TestClassificationScore:
    def _score_for_logit_gap(self, gap):
        # craft head weights so z1 - z0 == gap regardless of the embedding
        model = _bce_model()
        model.params["head.w"][:] = 0.0
        model.params["head.b"][:] = np.array([0.0, gap])
        return classification_score(model, _fm(np.zeros((3, 8))))

    def test_symmetric_logits_give_half(self):
        assert self._score_for_logit_gap(0.0) == 0.5

    def test_unit_gap_closed_form(self):
        assert self._score_for_logit_gap(1.0) == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), rel=1e-12)

    def test_large_negative_gap_saturates_finite(self):
        s = self._score_for_logit_gap(-40.0)
        assert 0.0 <= s < 1e-15
        assert np.isfinite(s)

    def test_monotone_in_logit_gap(self):
        gaps = np.linspace(-5, 5, 21)
        scores = [self._score_for_logit_gap(g) for g in gaps]
        assert np.all(np.diff(scores) > 0)

    def test_wrong_head_rejected(self):
        with pytest.raises(ScoreError):
            classification_score(_arc_model(), _fm(np.zeros((3, 8))))


class TestAverageRealEmbedding:
    def test_unit_norm_invariant(self):
        with pytest.raises(ValueError):
            AverageRealEmbedding(vector=np.array([1.0, 1.0]), n_source=1)
        AverageRealEmbedding(vector=np.array([1.0, 0.0]), n_source=1)

    def test_symmetry_of_two_orthogonal_vectors(self):
        e1 = np.array([1.0, 0.0])
        e2 = np.array([0.0, 1.0])
        mean = (e1 + e2) / 2
        avg = mean / np.linalg.norm(mean)
        np.testing.assert_allclose(avg, np.array([1, 1]) / np.sqrt(2), rtol=1e-12)

    def test_single_utterance_is_its_own_normalized_embedding(self, tmp_path):
        from synthsel.net import forward_embedding

        model = _arc_model(seed=2)
        frames = np.random.default_rng(0).normal(size=(6, 8))
        feats = _fm(frames)
        man = Manifest((UtteranceEntry(id="a", audio="a.wav", text="", label="real"),))
        avg = average_real_embedding(model, man, CFG, feature_loader=lambda e: feats)
        emb = forward_embedding(model, feats)
        np.testing.assert_allclose(avg.vector, emb / np.linalg.norm(emb), rtol=1e-6)
        assert avg.n_source == 1

    def test_duplicate_utterances_idempotent(self):
        model = _arc_model(seed=3)
        frames = _fm(np.random.default_rng(1).normal(size=(4, 8)))
        one = Manifest((UtteranceEntry(id="a", audio="a.wav", text="", label="real"),))
        two = Manifest((UtteranceEntry(id="a", audio="a.wav", text="", label="real"),
                        UtteranceEntry(id="b", audio="b.wav", text="", label="real")))
        avg1 = average_real_embedding(model, one, CFG, feature_loader=lambda e: frames)
        avg2 = average_real_embedding(model, two, CFG, feature_loader=lambda e: frames)
        np.testing.assert_allclose(avg1.vector, avg2.vector, rtol=1e-9)

    def test_empty_real_subset_rejected(self):
        model = _arc_model()
        man = Manifest((UtteranceEntry(id="s", audio="s.wav", text="", label="synthetic"),))
        with pytest.raises(ScoreError):
            average_real_embedding(model, man, CFG, feature_loader=lambda e: None)

    def test_json_round_trip(self, tmp_path):
        avg = AverageRealEmbedding(vector=np.array([0.6, 0.8]), n_source=3)
        path = write_average_embedding(tmp_path / "avg.json", avg)
        back = read_average_embedding(path)
        np.testing.assert_allclose(back.vector, avg.vector)
        assert back.n_source == 3


class TestSimilarityScore:
    def test_cosine_oracle(self):
        # oracle: dot product over norms on the raw vectors
        model = _arc_model(seed=4)
        from synthsel.net import forward_embedding

        rng = np.random.default_rng(2)
        feats = _fm(rng.normal(size=(5, 8)))
        v = rng.normal(size=4)
        avg = AverageRealEmbedding(vector=v / np.linalg.norm(v), n_source=2)
        s = similarity_score(model, feats, avg)
        emb = forward_embedding(model, feats)
        expected = float(emb @ avg.vector / (np.linalg.norm(emb) * np.linalg.norm(avg.vector)))
        assert s == pytest.approx(expected, abs=1e-9)
        assert -1.0 <= s <= 1.0

    def test_parallel_gives_one(self):
        model = _arc_model(seed=5)
        from synthsel.net import forward_embedding

        feats = _fm(np.random.default_rng(3).normal(size=(4, 8)))
        emb = forward_embedding(model, feats)
        avg = AverageRealEmbedding(vector=emb / np.linalg.norm(emb), n_source=1)
        assert similarity_score(model, feats, avg) == pytest.approx(1.0, abs=1e-7)

    def test_scale_invariance(self):
        # similarity depends only on embedding direction
        model = _arc_model(seed=6)
        rng = np.random.default_rng(4)
        v = rng.normal(size=4)
        avg = AverageRealEmbedding(vector=v / np.linalg.norm(v), n_source=1)
        feats = _fm(rng.normal(size=(4, 8)))
        s1 = similarity_score(model, feats, avg)
        assert -1.0 <= s1 <= 1.0


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    spec = ToyCorpusSpec(n_real=6, n_synthetic=6, min_duration_s=1.0,
                         max_duration_s=1.5, seed=13)
    return synthesize_toy_corpus(spec, out)


class TestScoreCorpus:
    def test_empty_manifest_empty_scores(self):
        model = init_model(NetConfig(head="bce"), seed=0)
        records, failures = score_corpus(model, Manifest(()), "cls_xent", CFG)
        assert records == [] and failures == []

    def test_manifest_order_and_thread_count_invariance(self, toy):
        model = init_model(NetConfig(head="bce"), seed=1)
        r1, f1 = score_corpus(model, toy.corpus, "cls_xent", CFG, threads=1)
        r4, f4 = score_corpus(model, toy.corpus, "cls_xent", CFG, threads=4)
        assert [r.utterance_id for r in r1] == list(toy.corpus.ids())
        assert r1 == r4 and f1 == f4

    def test_partial_failure_contract(self, toy, tmp_path):
        model = init_model(NetConfig(head="bce"), seed=1)
        entries = list(toy.corpus.entries)
        entries.append(UtteranceEntry(id="missing", audio="nope/missing.wav",
                                      text="", label="real"))
        man = Manifest(tuple(entries), root=toy.corpus.root)
        records, failures = score_corpus(model, man, "cls_xent", CFG)
        assert len(records) == len(toy.corpus)
        assert len(failures) == 1
        assert failures[0].utterance_id == "missing"

    def test_wrong_method_for_model(self, toy):
        model = init_model(NetConfig(head="bce"), seed=1)
        with pytest.raises(ScoreError):
            score_corpus(model, toy.corpus, "cos_arcface", CFG)
        with pytest.raises(ScoreError):
            score_corpus(model, toy.corpus, "ulm_acc", CFG)


class TestEvaluateUar:
    @staticmethod
    def _truth(n_real, n_synth):
        entries = [UtteranceEntry(id=f"r{i}", audio="", text="", label="real")
                   for i in range(n_real)]
        entries += [UtteranceEntry(id=f"s{i}", audio="", text="", label="synthetic")
                    for i in range(n_synth)]
        return Manifest(tuple(entries))

    def test_all_correct_gives_one(self):
        truth = self._truth(3, 3)
        records = [ScoreRecord(f"r{i}", 0.9, "cls_xent") for i in range(3)]
        records += [ScoreRecord(f"s{i}", 0.1, "cls_xent") for i in range(3)]
        assert evaluate_uar(records, truth).uar == 1.0

    def test_asymmetric_recall_arithmetic(self):
        # 100% real recall, 83% synthetic recall -> UAR 0.915
        truth = self._truth(100, 100)
        records = [ScoreRecord(f"r{i}", 0.9, "cls_xent") for i in range(100)]
        records += [ScoreRecord(f"s{i}", 0.1 if i < 83 else 0.9, "cls_xent")
                    for i in range(100)]
        report = evaluate_uar(records, truth)
        assert report.real_recall == 1.0
        assert report.synthetic_recall == pytest.approx(0.83)
        assert report.uar == pytest.approx(0.915)

    def test_degenerate_predictor_gives_half(self):
        truth = self._truth(4, 4)
        records = [ScoreRecord(e.id, 0.99, "cls_xent") for e in truth.entries]
        assert evaluate_uar(records, truth).uar == 0.5

    def test_unknown_id_rejected(self):
        truth = self._truth(1, 1)
        with pytest.raises(ScoreError):
            evaluate_uar([ScoreRecord("ghost", 0.5, "cls_xent")], truth)

    def test_threshold_is_strict(self):
        # score exactly 0.5 predicts synthetic
        truth = self._truth(1, 1)
        records = [ScoreRecord("r0", 0.5, "cls_xent"), ScoreRecord("s0", 0.5, "cls_xent")]
        report = evaluate_uar(records, truth)
        assert report.real_recall == 0.0
        assert report.synthetic_recall == 1.0


class TestScoreFileIo:
    def test_round_trip_and_format(self, tmp_path):
        records = [ScoreRecord("a", 0.123456789, "cls_xent"),
                   ScoreRecord("b", 0.5, "cls_xent")]
        path = write_score_file(tmp_path / "s.tsv", records)
        text = path.read_text()
        lines = text.splitlines()
        assert lines[0] == "id\tscore\tmethod"
        assert lines[1] == "a\t0.123457\tcls_xent"
        back = read_score_file(path)
        assert [r.utterance_id for r in back] == ["a", "b"]
        assert back[0].score == pytest.approx(0.123457)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("nope\n")
        with pytest.raises(ScoreError):
            read_score_file(path)

    def test_score_bounds_validated(self):
        with pytest.raises(ScoreError):
            ScoreRecord("a", 1.5, "cls_xent")
        with pytest.raises(ScoreError):
            ScoreRecord("a", -1.5, "cos_arcface")
        ScoreRecord("a", 120.0, "ulm_ppl")  # perplexities are unbounded above
