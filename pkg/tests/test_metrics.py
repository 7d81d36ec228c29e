"""Scoring oracles: hand alignments, direct BLEU formula, significance."""

import math

import numpy as np
import pytest

from dualscribe.errors import ContractError, FormatError
from dualscribe.metrics import (
    EquivalenceTable,
    bleu4,
    bootstrap_bleu_pvalue,
    corpus_bleu,
    corpus_wer,
    mapsswe_pvalue,
    strip_for_scoring,
    wer,
)

rng0 = np.random.default_rng


class TestStripForScoring:
    def test_drops_tags_punctuation_case(self):
        out = strip_for_scoring("Hello, <*d>World! <spk> YES")
        assert out == ["hello", "world", "yes"]

    def test_task_tokens_vanish(self):
        assert strip_for_scoring("<verbatim> a b") == ["a", "b"]

    def test_plain_text_split(self):
        assert strip_for_scoring("it's  fine") == ["it's", "fine"]


class TestEquivalenceTable:
    def test_chains_resolve_and_idempotent(self):
        eq = EquivalenceTable({"a": "b", "b": "c"})
        assert eq.canonical("a") == "c"
        once = eq.apply(["a", "b", "z"])
        assert once == ["c", "c", "z"]
        assert eq.apply(once) == once

    def test_cycle_rejected(self):
        with pytest.raises(FormatError):
            EquivalenceTable({"a": "b", "b": "a"})

    def test_tsv_load(self, tmp_path):
        path = tmp_path / "eq.tsv"
        path.write_text("# demo\nokay\tok\nuh-huh\tyes\n", encoding="utf-8")
        eq = EquivalenceTable.load(path)
        assert eq.canonical("okay") == "ok"
        assert eq.canonical("uh-huh") == "yes"

    def test_bad_tsv_line(self, tmp_path):
        path = tmp_path / "eq.tsv"
        path.write_text("okay ok\n", encoding="utf-8")
        with pytest.raises(FormatError):
            EquivalenceTable.load(path)


class TestWer:
    def test_identical_is_zero(self):
        out = wer(["a", "b", "c"], ["a", "b", "c"])
        assert out == {"wer": 0.0, "sub": 0, "del": 0, "ins": 0, "n": 3}

    def test_one_substitution(self):
        out = wer(["a", "x", "c"], ["a", "b", "c"])
        assert out["sub"] == 1 and out["del"] == 0 and out["ins"] == 0
        assert np.isclose(out["wer"], 100.0 / 3.0)

    def test_deletion_and_insertion(self):
        assert wer(["a", "c"], ["a", "b", "c"])["del"] == 1
        assert wer(["a", "b", "x", "c"], ["a", "b", "c"])["ins"] == 1

    def test_equivalence_before_alignment(self):
        eq = EquivalenceTable({"okay": "ok"})
        assert wer(["okay"], ["ok"], eq)["wer"] == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ContractError):
            wer(["a"], [])

    def test_empty_hypothesis_is_all_deletions(self):
        out = wer([], ["a", "b"])
        assert out["del"] == 2 and out["wer"] == 100.0

    @pytest.mark.parametrize("seed", range(6))
    def test_swapping_arguments_swaps_del_ins(self, seed):
        r = rng0(seed)
        vocab = list("abcde")
        h = [vocab[i] for i in r.integers(0, 5, size=r.integers(1, 8))]
        f = [vocab[i] for i in r.integers(0, 5, size=r.integers(1, 8))]
        fwd = wer(h, f)
        rev = wer(f, h)
        assert fwd["sub"] == rev["sub"]
        assert fwd["del"] == rev["ins"] and fwd["ins"] == rev["del"]

    def test_corpus_pools_counts(self):
        out = corpus_wer([["a"], ["x", "b"]], [["a"], ["a", "b"]])
        assert out["n"] == 3 and out["sub"] == 1
        assert np.isclose(out["wer"], 100.0 / 3.0)


class TestBleu:
    def test_identical_is_100(self):
        assert bleu4(list("abcd"), list("abcd")) == 100.0

    def test_disjoint_unigrams_score_zero(self):
        # unigram precision is unsmoothed, so no overlap means zero
        assert bleu4(["p", "q", "r", "s"], ["a", "b", "c", "d"]) == 0.0

    def test_partial_overlap_matches_direct_formula(self):
        got = bleu4(["a", "b", "c", "d"], ["a", "b", "x", "d"])
        # precisions 3/4 and 1/3; orders 3 and 4 have no matches and
        # take (0+1)/(2+1) and (0+1)/(1+1); lengths equal, no penalty
        want = 100.0 * (0.75 * (1 / 3) * (1 / 3) * 0.5) ** 0.25
        assert np.isclose(got, want, atol=1e-10)

    def test_half_length_brevity_penalty(self):
        got = bleu4(["a", "b"], ["a", "b", "c", "d"])
        # perfect precisions at every defined order; penalty e^(1-4/2)
        want = 100.0 * math.exp(1.0 - 2.0)
        assert np.isclose(got, want, atol=1e-10)

    def test_empty_hypothesis_scores_zero(self):
        assert bleu4([], ["a", "b"]) == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ContractError):
            bleu4(["a"], [])

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded_and_maximal_only_when_identical(self, seed):
        r = rng0(seed + 20)
        vocab = list("abcd")
        h = [vocab[i] for i in r.integers(0, 4, size=6)]
        f = [vocab[i] for i in r.integers(0, 4, size=6)]
        score = bleu4(h, f)
        assert 0.0 <= score <= 100.0
        if h != f:
            assert score < 100.0

    def test_corpus_bleu_pools_ngram_counts(self):
        hyps = [["a", "b"], ["c", "x"]]
        refs = [["a", "b"], ["c", "d"]]
        got = corpus_bleu(hyps, refs)
        # pooled: m1=3/t1=4, m2=1/t2=2, orders 3-4 smoothed to 1;
        # pooled lengths equal so no brevity penalty
        want = 100.0 * (0.75 * 0.5) ** 0.25
        assert np.isclose(got, want, atol=1e-10)
        with pytest.raises(ContractError):
            corpus_bleu([], [])


class TestBootstrap:
    def _corpus(self, n, seed=0):
        r = rng0(seed)
        vocab = list("abcdefgh")
        return [[vocab[i] for i in r.integers(0, 8, size=5)] for _ in range(n)]

    def test_identical_systems_give_one(self):
        refs = self._corpus(20)
        assert bootstrap_bleu_pvalue(refs, refs, refs) == 1.0

    def test_total_separation_is_significant(self):
        refs = self._corpus(100)
        junk = [["zzz"] for _ in refs]
        p = bootstrap_bleu_pvalue(refs, junk, refs, seed=3)
        assert p < 0.01
        assert np.isclose(p, 2.0 * 1.0 / 1001.0)

    def test_seeded_reproducible(self):
        refs = self._corpus(30, seed=1)
        hyps = [h[:4] for h in self._corpus(30, seed=2)]
        a = bootstrap_bleu_pvalue(hyps, refs, refs, seed=9)
        b = bootstrap_bleu_pvalue(hyps, refs, refs, seed=9)
        assert a == b

    def test_stable_under_more_resamples(self):
        refs = self._corpus(40, seed=4)
        # a middling system: half the segments copied, half scrambled
        hyps = [r if i % 2 == 0 else r[::-1] for i, r in enumerate(refs)]
        base = [r[:3] for r in refs]
        p1 = bootstrap_bleu_pvalue(hyps, base, refs, n_resamples=1000, seed=5)
        p2 = bootstrap_bleu_pvalue(hyps, base, refs, n_resamples=2000, seed=5)
        assert abs(p1 - p2) < 0.05

    def test_needs_two_segments(self):
        with pytest.raises(ContractError):
            bootstrap_bleu_pvalue([["a"]], [["a"]], [["a"]])


class TestMapsswe:
    def test_identical_vectors(self):
        assert mapsswe_pvalue([1, 2, 3], [1, 2, 3]) == 1.0

    def test_constant_nonzero_difference(self):
        assert mapsswe_pvalue([1] * 50, [0] * 50) == 0.0

    def test_matches_independent_recomputation(self):
        d = rng0(7).normal(0.5, 1.0, size=100)
        a = d
        b = np.zeros(100)
        got = mapsswe_pvalue(a, b)
        mean = d.sum() / len(d)
        var = ((d - mean) ** 2).sum() / (len(d) - 1)
        z = mean / math.sqrt(var / len(d))
        phi = 0.5 * (1.0 + math.erf(abs(z) / math.sqrt(2.0)))
        assert abs(got - 2.0 * (1.0 - phi)) < 1e-10

    def test_bounds_and_contracts(self):
        r = rng0(8)
        for _ in range(5):
            a = r.integers(0, 6, size=30)
            b = r.integers(0, 6, size=30)
            assert 0.0 <= mapsswe_pvalue(a, b) <= 1.0
        with pytest.raises(ContractError):
            mapsswe_pvalue([1], [2])
        with pytest.raises(ContractError):
            mapsswe_pvalue([1, 2], [1, 2, 3])
