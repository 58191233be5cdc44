import math

import numpy as np
import pytest

from dualdict.data import DictEntry, EmbeddingTable
from dualdict.metrics import (
    corpus_bleu,
    corpus_rouge_l,
    evaluate_defmod,
    evaluate_revdic,
    retrieval_report,
    rouge_l_f1,
)
from dualdict.model import UnifiedModel
from dualdict.vocab import build_whitespace_vocab

from conftest import tiny_model_config


class TestRetrievalReport:
    def test_all_rank_one(self):
        r = retrieval_report([1, 1, 1])
        assert r.acc1 == 1.0 and r.median_rank == 1.0
        assert r.rank_std_forced == 0.0 and r.rank_std_real == 0.0

    def test_force_1000_worked_example(self):
        # {1, 101} -> forced {1, 1000}: population stds 499.5 and 50.
        r = retrieval_report([1, 101])
        assert r.rank_std_forced == 499.5
        assert r.rank_std_real == 50.0

    def test_accuracy_thresholds(self):
        r = retrieval_report([5, 50, 500])
        assert r.acc1 == 0.0
        assert r.acc10 == pytest.approx(1 / 3)
        assert r.acc100 == pytest.approx(2 / 3)
        assert r.median_rank == 50.0

    def test_even_count_median_midpoint(self):
        assert retrieval_report([1, 2, 3, 4]).median_rank == 2.5

    def test_forced_equals_real_when_all_within_100(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ranks = rng.integers(1, 101, size=rng.integers(1, 40)).tolist()
            r = retrieval_report(ranks)
            assert r.rank_std_forced == r.rank_std_real

    def test_rank_below_one_rejected(self):
        with pytest.raises(ValueError):
            retrieval_report([0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            retrieval_report([])


class TestCorpusBleu:
    def test_exact_match(self):
        hyp = ["the", "black", "dog", "barked"]
        assert corpus_bleu([hyp], [[list(hyp)]]) == 1.0

    def test_short_hypothesis_zero_fourgram_denominator(self):
        # 3-token hypothesis has no 4-grams: unsmoothed corpus BLEU is 0.
        assert corpus_bleu([["the", "cat", "sat"]],
                           [[["the", "cat", "sat", "down"]]]) == 0.0

    def test_partial_overlap_hand_value(self):
        hyp = list("abcdef")
        ref = list("abcdxy")
        # p1=4/6, p2=3/5, p3=2/4, p4=1/3; equal lengths, no penalty.
        expected = math.exp(sum(math.log(x) for x in (4 / 6, 3 / 5, 2 / 4, 1 / 3)) / 4)
        np.testing.assert_allclose(corpus_bleu([hyp], [[ref]]), expected, atol=1e-9)

    def test_brevity_penalty_hand_value(self):
        hyp = list("abcd")
        ref = list("abcdef")
        # All precisions 1; c=4, r=6 -> BP = exp(1 - 6/4).
        np.testing.assert_allclose(corpus_bleu([hyp], [[ref]]),
                                   math.exp(1 - 6 / 4), atol=1e-9)

    def test_multi_reference_clipping(self):
        # No single reference covers the hypothesis, but the union does.
        hyp = list("abcde")
        refs = [list("abcdf"), list("bcdea")]
        np.testing.assert_allclose(corpus_bleu([hyp], [refs]), 1.0, atol=1e-9)

    def test_corpus_pooling_hand_value(self):
        # Counts pool over instances before the ratio is taken.
        hyps = [list("abcd"), list("efgh")]
        refs = [[list("abcd")], [list("wxyzv")]]
        # p_n = (4/8, 3/6, 2/4, 1/2); c=8, r=4+5=9 -> BP = exp(1-9/8).
        expected = 0.5 * math.exp(1 - 9 / 8)
        np.testing.assert_allclose(corpus_bleu(hyps, refs), expected, atol=1e-9)

    def test_closest_reference_length_ties_go_short(self):
        # Hyp length 4; refs of length 3 and 5 tie on |L-4|: r=3, so c>r.
        hyp = list("abcd")
        refs = [list("abc"), list("abcde")]
        np.testing.assert_allclose(corpus_bleu([hyp], [refs]), 1.0, atol=1e-9)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            corpus_bleu([["a"]], [])

    def test_empty_reference_set_rejected(self):
        with pytest.raises(ValueError):
            corpus_bleu([["a"]], [[]])


class TestRougeL:
    def test_exact_match(self):
        assert rouge_l_f1(list("abcd"), list("abcd")) == 1.0

    def test_worked_example(self):
        # LCS("abcd", "acde") = "acd": p = r = 3/4 -> F1 = 0.75.
        np.testing.assert_allclose(rouge_l_f1(list("abcd"), list("acde")), 0.75,
                                   atol=1e-9)

    def test_no_overlap(self):
        assert rouge_l_f1(list("ab"), list("cd")) == 0.0

    def test_order_sensitivity(self):
        # Same bag of tokens, different order: only one survives the LCS.
        np.testing.assert_allclose(rouge_l_f1(list("ab"), list("ba")), 0.5, atol=1e-9)

    def test_asymmetric_lengths(self):
        # p=1, r=1/2 -> harmonic mean 2/3.
        np.testing.assert_allclose(rouge_l_f1(list("abc"), list("abcdef")), 2 / 3,
                                   atol=1e-9)

    def test_corpus_mean_of_per_instance_max(self):
        hyps = [list("abc"), list("xy")]
        refs = [[list("zzz"), list("abc")], [list("xy"), list("qq")]]
        np.testing.assert_allclose(corpus_rouge_l(hyps, refs), 1.0, atol=1e-9)

    def test_empty_sequences_score_zero(self):
        assert rouge_l_f1([], list("ab")) == 0.0
        assert rouge_l_f1(list("ab"), []) == 0.0


class TestModelEvaluation:
    def test_defmod_groups_multiple_definitions_per_word(self):
        vocab = build_whitespace_vocab(["x y z"])
        model = UnifiedModel(tiny_model_config(), len(vocab), seed=1)
        model.training = False
        entries = [
            DictEntry("w", ["x", "y"], np.ones(6)),
            DictEntry("w", ["y", "z"], np.ones(6)),
            DictEntry("v", ["z"], np.zeros(6)),
        ]
        report = evaluate_defmod(model, entries, vocab, beam_size=1, max_len=4)
        # n counts entries even though only two hypotheses were decoded.
        assert report.n == 3
        assert 0.0 <= report.bleu <= 1.0
        assert 0.0 <= report.rouge_l <= 1.0

    def test_random_model_acc100_matches_chance(self):
        # Gold assignment is independent of the untrained ranking, so
        # acc@100 on a 1000-candidate table concentrates near 100/1000.
        rng = np.random.default_rng(42)
        vocab = build_whitespace_vocab(["q r s t u"])
        model = UnifiedModel(tiny_model_config(), len(vocab), seed=7)
        model.training = False
        table = EmbeddingTable([f"c{i:04d}" for i in range(1000)],
                               rng.standard_normal((1000, 6)))
        toks = vocab.pieces
        hits = 0
        trials = 400
        from dualdict.inference import reverse_lookup

        for _ in range(trials):
            definition = list(rng.choice(toks, size=3))
            gold = f"c{rng.integers(0, 1000):04d}"
            res = reverse_lookup(model, definition, table, vocab, gold_word=gold)
            hits += res.gold_rank <= 100
        assert abs(hits / trials - 0.1) < 0.05

    def test_overfit_corpus_perfect_retrieval(self, overfit_run):
        entries, vocab, result, table, _ = overfit_run
        report = evaluate_revdic(result.best_model, entries, table, vocab)
        assert report.acc1 == 1.0
        assert report.median_rank == 1.0
