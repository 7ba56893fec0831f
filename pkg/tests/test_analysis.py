import numpy as np
import pytest

from synthsel.analysis import (AnalysisError, filter_unseen_and_resample,
                               render_histogram_text, selection_report, tokenize,
                               unseen_words, utterances_containing, vocabulary,
                               write_ranges_tsv, write_report_json)
from synthsel.corpus import Manifest, UtteranceEntry
from synthsel.scorer import ScoreRecord
from synthsel.selection import SelectionRange, SelectionResult, select


def _man(texts, label="synthetic", prefix="u"):
    return Manifest(tuple(
        UtteranceEntry(id=f"{prefix}{i}", audio="", text=t, label=label)
        for i, t in enumerate(texts)))


class TestTokenize:
    def test_case_and_dedup(self):
        vocab = vocabulary(_man(["the cat", "The CAT sat"]))
        assert vocab.words == {"THE", "CAT", "SAT"}

    def test_empty_manifest(self):
        assert len(vocabulary(Manifest(()))) == 0

    def test_internal_apostrophe_kept(self):
        assert tokenize("don't  stop") == ["DON'T", "STOP"]

    def test_edge_punctuation_stripped(self):
        assert tokenize('"hello," she said...') == ["HELLO", "SHE", "SAID"]

    def test_pure_punctuation_dropped(self):
        assert tokenize("--- ... !!!") == []


class TestUnseenWords:
    def test_basic(self):
        train = vocabulary(_man(["the cat"], label="real"))
        eval_man = _man(["the dog"])
        pool = _man(["a dog runs"])
        report = unseen_words(train, eval_man, pool)
        assert report.words == ("DOG",)
        assert report.count == 1

    def test_eval_subset_of_train_empty(self):
        train = vocabulary(_man(["the cat sat"], label="real"))
        report = unseen_words(train, _man(["cat the"]), _man(["the cat sat mat"]))
        assert report.words == ()

    def test_word_must_be_in_pool_too(self):
        train = vocabulary(_man(["the"], label="real"))
        report = unseen_words(train, _man(["zebra"]), _man(["no stripes here"]))
        assert report.words == ()

    def test_three_way_toy_matches_set_algebra(self):
        # oracle: plain set operations over the token sets
        train_texts = ["alpha beta", "gamma delta"]
        eval_texts = ["beta epsilon zeta", "delta eta"]
        pool_texts = ["epsilon things", "eta stuff", "theta filler"]
        train = vocabulary(_man(train_texts, label="real"))
        report = unseen_words(train, _man(eval_texts), _man(pool_texts))

        t = {w for s in train_texts for w in s.upper().split()}
        e = {w for s in eval_texts for w in s.upper().split()}
        p = {w for s in pool_texts for w in s.upper().split()}
        assert set(report.words) == (e & p) - t
        assert report.words == tuple(sorted(report.words))

    def test_disjoint_from_train_vocab_by_construction(self):
        train = vocabulary(_man(["some shared words here"], label="real"))
        report = unseen_words(train, _man(["shared novel"]), _man(["novel words"]))
        assert not set(report.words) & train.words


class TestUtterancesContaining:
    def test_empty_word_list(self):
        count, ids = utterances_containing(_man(["a b", "c d"]), [])
        assert count == 0 and ids == ()

    def test_all_match(self):
        pool = _man(["common x", "common y"])
        count, ids = utterances_containing(pool, ["COMMON"])
        assert count == 2

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(0)
        words = [f"W{i}" for i in range(20)]
        texts = [" ".join(rng.choice(words, size=5)) for _ in range(50)]
        pool = _man(texts)
        target = ["W3", "W7", "W11"]
        count, ids = utterances_containing(pool, target)
        expected = sorted(
            e.id for e in pool.entries
            if any(w in e.text.upper().split() for w in target))
        assert list(ids) == expected
        assert count == len(expected)

    def test_monotone_in_word_list(self):
        pool = _man(["aa bb", "cc dd", "ee ff"])
        _, small = utterances_containing(pool, ["AA"])
        _, big = utterances_containing(pool, ["AA", "CC"])
        assert set(small) <= set(big)


class TestSelectionReport:
    @staticmethod
    def _recs(scores):
        return [ScoreRecord(f"u{i}", s, "cls_xent") for i, s in enumerate(scores)]

    def test_partition_counts_sum_to_total(self):
        rng = np.random.default_rng(1)
        recs = self._recs(rng.uniform(0, 1, size=300))
        ranges = [SelectionRange(0.0, 0.33), SelectionRange(0.33, 0.66),
                  SelectionRange(0.66, 1.01)]
        report = selection_report(recs, ranges)
        assert sum(rc.count for rc in report.ranges) == 300
        assert sum(rc.fraction for rc in report.ranges) == pytest.approx(1.0)

    def test_empty_scores_all_zero(self):
        report = selection_report([], [SelectionRange(0, 1)])
        assert report.total == 0
        assert report.ranges[0].count == 0
        assert all(c == 0 for c in report.bin_counts)

    def test_uniform_thirds_within_3_sigma(self):
        # binomial bound: sd of a third over n draws
        n = 3000
        rng = np.random.default_rng(2)
        recs = self._recs(rng.uniform(0, 1, size=n))
        thirds = [SelectionRange(0, 1 / 3), SelectionRange(1 / 3, 2 / 3),
                  SelectionRange(2 / 3, 1.000001)]
        report = selection_report(recs, thirds)
        sigma = np.sqrt((1 / 3) * (2 / 3) / n)
        for rc in report.ranges:
            assert abs(rc.fraction - 1 / 3) <= 3 * sigma

    def test_overlapping_ranges_rejected(self):
        with pytest.raises(AnalysisError):
            selection_report([], [SelectionRange(0, 0.5), SelectionRange(0.4, 1.0)])

    def test_histogram_has_50_bins_and_counts_everything(self):
        rng = np.random.default_rng(3)
        recs = self._recs(rng.uniform(0, 1, size=500))
        report = selection_report(recs, [])
        assert len(report.bin_counts) == 50
        assert len(report.bin_edges) == 51
        assert sum(report.bin_counts) == 500

    def test_fractions_sum_below_one_when_ranges_partial(self):
        recs = self._recs([0.1, 0.5, 0.9])
        report = selection_report(recs, [SelectionRange(0.4, 0.6)])
        assert sum(rc.fraction for rc in report.ranges) <= 1.0

    def test_text_rendering(self):
        recs = self._recs([0.2, 0.4, 0.6])
        text = render_histogram_text(selection_report(recs, []))
        assert text.count("\n") == 51
        assert "n=3" in text

    def test_json_and_tsv_outputs(self, tmp_path):
        recs = self._recs([0.1, 0.3])
        report = selection_report(recs, [SelectionRange(0.0, 0.2)])
        jpath = write_report_json(tmp_path / "r.json", report, extra={"config_hash": "x"})
        import json

        payload = json.loads(jpath.read_text())
        assert payload["total"] == 2
        assert payload["ranges"][0]["count"] == 1
        tpath = write_ranges_tsv(tmp_path / "r.tsv", report)
        lines = tpath.read_text().splitlines()
        assert lines[0] == "low\thigh\tcount\tfraction"
        assert lines[1].startswith("0\t0.2\t1\t")


class TestFilterUnseenAndResample:
    def test_swap_keeps_size_and_range(self):
        rng = np.random.default_rng(4)
        scores = rng.uniform(0, 1, size=100)
        recs = [ScoreRecord(f"u{i}", s, "cls_xent") for i, s in enumerate(scores)]
        texts = ["planted word" if i % 4 == 0 else "plain text" for i in range(100)]
        pool = _man(texts)  # ids u0..u99 match records
        srange = SelectionRange(0.2, 0.8)
        sel = select(recs, srange)
        out = filter_unseen_and_resample(sel, pool, ["PLANTED"], recs, srange, seed=0)
        flagged = {e.id for e in pool.entries if "planted" in e.text}
        assert not set(out.ids) & flagged
        by_id = {r.utterance_id: r.score for r in recs}
        assert all(by_id[i] in srange for i in out.ids)
        in_range_unflagged = [r for r in recs
                              if r.score in srange and r.utterance_id not in flagged]
        expected_size = min(len(sel.ids), len(in_range_unflagged))
        assert len(out.ids) == expected_size

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(0, 1, size=60)
        recs = [ScoreRecord(f"u{i}", s, "cls_xent") for i, s in enumerate(scores)]
        pool = _man(["flag" if i % 3 == 0 else "ok" for i in range(60)])
        srange = SelectionRange(0.1, 0.9)
        sel = select(recs, srange)
        a = filter_unseen_and_resample(sel, pool, ["FLAG"], recs, srange, seed=9)
        b = filter_unseen_and_resample(sel, pool, ["FLAG"], recs, srange, seed=9)
        assert a.ids == b.ids
