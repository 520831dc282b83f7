import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from advcap.bleu import EvalPair, brevity_penalty, clipped_ngram_precision, corpus_bleu
from oracles import brute_bleu, brute_clipped


def random_corpus(rng: random.Random, n_pairs: int, vocab: int = 20):
    pairs = []
    for _ in range(n_pairs):
        cand = [rng.randrange(vocab) for _ in range(rng.randint(0, 12))]
        refs = [[rng.randrange(vocab) for _ in range(rng.randint(1, 12))] for _ in range(rng.randint(1, 5))]
        pairs.append((cand, refs))
    return pairs


class TestClipped:
    def test_repeated_word(self):
        pair = EvalPair("the the the the".split(), ["the cat".split()])
        assert clipped_ngram_precision([pair], 1) == (1, 4)

    def test_self_match(self):
        seq = "a red circle above a blue square".split()
        pairs = [EvalPair(seq, [seq, "a blue square below a red circle".split()])]
        for n in range(1, len(seq) + 1):
            m, t = clipped_ngram_precision(pairs, n)
            assert m == t == len(seq) - n + 1

    def test_disjoint(self):
        assert clipped_ngram_precision([EvalPair("x y z".split(), ["a b c".split()])], 1)[0] == 0

    def test_short_candidate_contributes_nothing(self):
        assert clipped_ngram_precision([EvalPair(["a"], [["a", "b"]])], 2) == (0, 0)

    def test_invalid_order(self):
        with pytest.raises(ValueError):
            clipped_ngram_precision([EvalPair(["a"], [["a"]])], 0)


class TestBrevity:
    def test_equal(self):
        assert brevity_penalty(5, 5) == 1.0

    def test_short(self):
        assert brevity_penalty(3, 6) == pytest.approx(0.36788, abs=1e-5)
        assert brevity_penalty(3, 6) == math.exp(-1)

    def test_long(self):
        assert brevity_penalty(9, 4) == 1.0

    def test_empty_candidate(self):
        assert brevity_penalty(0, 4) == 0.0

    def test_closest_reference_tie_prefers_shorter(self):
        # candidate length 5 is equidistant from refs of length 4 and 6; the shorter one counts
        report = corpus_bleu([EvalPair(list("abcde"), [list("abcd"), list("abcdef")])])
        assert report.effective_ref_len == 4


class TestCorpusBleu:
    def test_identical(self):
        seqs = [list("abcdef"), list("ghijk"), list("lmnopqr")]
        report = corpus_bleu([EvalPair(s, [s, list("zzzz")]) for s in seqs])
        assert report.score == 1.0
        assert report.n_gram_precisions == [1.0] * 4 and report.brevity_penalty == 1.0

    def test_no_overlap(self):
        report = corpus_bleu([EvalPair(list("abcd"), [list("wxyz")])])
        assert report.score == pytest.approx(1e-9, rel=1e-9)
        assert report.n_gram_precisions == [0.0] * 4

    def test_empty(self):
        with pytest.raises(ValueError):
            corpus_bleu([])

    def test_degenerate_empty_candidates(self):
        report = corpus_bleu([EvalPair([], [["a", "b"]])])
        assert report.score == 0.0 and report.degenerate

    def test_known_value(self):
        # hand count: unigrams 5/6, bigrams 3/5, trigrams 1/4, 4-grams 0/3 -> floored
        cand = "a red circle above a square".split()
        ref = "a red circle left of a square".split()
        report = corpus_bleu([EvalPair(cand, [ref])])
        assert report.n_gram_precisions == [5 / 6, 3 / 5, 1 / 4, 0.0]
        expected = math.exp(1 - 7 / 6) * math.exp((math.log(5 / 6) + math.log(3 / 5) + math.log(1 / 4)
                                                   + math.log(1e-9)) / 4)
        assert report.score == pytest.approx(expected, rel=1e-12)

    def test_matches_oracle(self):
        rng = random.Random(0)
        for _ in range(200):
            corpus = random_corpus(rng, rng.randint(1, 30))
            pairs = [EvalPair(c, r) for c, r in corpus]
            for n in range(1, 5):
                assert clipped_ngram_precision(pairs, n) == brute_clipped(corpus, n)
            assert corpus_bleu(pairs).score == pytest.approx(brute_bleu(corpus), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_range_and_permutation_invariance(seed):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(1, 15), vocab=6)
    pairs = [EvalPair(c, r) for c, r in corpus]
    score = corpus_bleu(pairs).score
    assert 0.0 <= score <= 1.0
    shuffled = pairs[:]
    rng.shuffle(shuffled)
    assert corpus_bleu(shuffled).score == pytest.approx(score, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_adding_reference_never_lowers_matches(seed):
    rng = random.Random(seed)
    corpus = random_corpus(rng, rng.randint(1, 10), vocab=6)
    pairs = [EvalPair(c, r) for c, r in corpus]
    k = rng.randrange(len(corpus))
    extra = [rng.randrange(6) for _ in range(rng.randint(1, 10))]
    more = [EvalPair(c, r + [extra] if i == k else r) for i, (c, r) in enumerate(corpus)]
    for n in range(1, 5):
        assert clipped_ngram_precision(more, n)[0] >= clipped_ngram_precision(pairs, n)[0]
