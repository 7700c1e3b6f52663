import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cider_oracle import oracle_cider_d
from refinecap.metrics import (
    CorpusIdf,
    NGramStats,
    bleu,
    cider_d,
    evaluate,
    lcs_length,
    rouge_l,
)


def toks(s):
    return s.split()


# Hand-built corpus: three scenes, uneven reference counts, shared n-grams.
CORPUS = [
    [toks("a red circle above a blue square"), toks("there is a red circle above a blue square")],
    [toks("a small green star"), toks("we can see a small green star"), toks("a green star in the scene")],
    [toks("a big red circle beside a big red star"), toks("a picture of a big red circle beside a big red star")],
]
CANDIDATES = [
    toks("a red circle above a square"),
    toks("a small green star in the scene"),
    toks("a big red star beside a big red circle circle"),
]


class TestNGrams:
    def test_total_counts(self):
        s = NGramStats.of(toks("a b a b c"))
        assert [sum(c.values()) for c in s.counts] == [5, 4, 3, 2]
        assert sum(NGramStats.of(["x"]).counts[3].values()) == 0


class TestBleu:
    def test_identical_is_one(self):
        ref = toks("a big red circle above a small blue square")
        assert bleu([ref], [[ref]]).corpus[3] == 1.0

    def test_no_overlap_is_zero(self):
        assert bleu([toks("x y z w")], [[toks("a b c d")]]).corpus == [0.0] * 4

    def test_brevity_penalty_hand_case(self):
        r = bleu([toks("the cat sat")], [[toks("the cat sat down")]], max_n=1)
        assert r.corpus[0] == pytest.approx(math.exp(1 - 4 / 3), abs=1e-4)
        assert r.corpus[0] == pytest.approx(0.7165, abs=1e-4)

    def test_clipping(self):
        # "the the the" vs "the cat": clipped unigram precision 1/3, c >= r so no penalty
        r = bleu([toks("the the the")], [[toks("the cat")]], max_n=1)
        assert r.corpus[0] == pytest.approx(1 / 3)

    def test_closest_reference_length(self):
        # c=3; refs of length 2 and 4 tie on distance, shorter (2) wins -> no penalty
        r = bleu([toks("a b c")], [[toks("a b"), toks("a b c d")]], max_n=1)
        assert r.corpus[0] == 1.0

    def test_empty_candidate_flagged(self):
        r = bleu([[], toks("a b")], [[toks("a b")], [toks("a b")]], max_n=2)
        assert r.per_candidate[0] == [0.0, 0.0]
        assert r.empty_candidates == [0]


class TestRouge:
    def test_identical(self):
        s = toks("a b c d")
        assert rouge_l(s, [s]) == 1.0

    def test_lcs(self):
        assert lcs_length(toks("a b c d"), toks("a c d")) == 3

    def test_disjoint(self):
        assert rouge_l(toks("a b"), [toks("c d")]) == 0.0

    def test_empty(self):
        assert rouge_l([], [toks("a")]) == 0.0

    def test_hand_value(self):
        # lcs 3, p = 3/4, r = 3/3
        p, r, b = 0.75, 1.0, 1.2
        assert rouge_l(toks("a b c d"), [toks("a c d")]) == pytest.approx((1 + b * b) * p * r / (r + b * b * p))


class TestCider:
    def test_identical_single_reference_is_ten(self):
        idf = CorpusIdf(CORPUS)
        ref = CORPUS[0][0]
        assert cider_d([ref], [[ref]], idf) == [10.0]

    def test_empty_candidate(self):
        assert cider_d([[]], [CORPUS[0]], CorpusIdf(CORPUS)) == [0.0]

    def test_unseen_ngrams_only(self):
        assert cider_d([toks("zzz qqq")], [CORPUS[0]], CorpusIdf(CORPUS)) == [0.0]

    def test_matches_brute_force_oracle(self):
        got = cider_d(CANDIDATES, CORPUS)
        for cand, refs, g in zip(CANDIDATES, CORPUS, got):
            assert g == pytest.approx(oracle_cider_d(cand, refs, CORPUS), abs=1e-9)
        assert all(0.0 < g < 10.0 for g in got)

    def test_idf_of_ubiquitous_ngram_is_zero(self):
        idf = CorpusIdf(CORPUS)
        assert idf.idf(("a",)) == 0.0
        assert idf.idf(("nowhere",)) == pytest.approx(math.log(3))

    def test_length_penalty_monotone(self):
        # same n-gram content, references padded with unseen tokens grow l_s only
        idf = CorpusIdf(CORPUS)
        cand = toks("a red circle above a blue square")
        prev = math.inf
        for extra in range(0, 8):
            s = cider_d([cand], [[cand + ["pad%d" % i for i in range(extra)]]], idf)[0]
            assert s <= prev
            prev = s


words = st.sampled_from("a b c d e f".split())
sentences = st.lists(words, min_size=0, max_size=8)
refsets = st.lists(st.lists(words, min_size=1, max_size=8), min_size=1, max_size=3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(sentences, refsets), min_size=1, max_size=4))
def test_metric_ranges_and_oracle(pairs):
    cands = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    rep = evaluate(cands, refs)
    for row in rep.per_candidate:
        assert 0.0 <= row["cider_d"] <= 10.0 + 1e-12
        assert 0.0 <= row["rouge_l"] <= 1.0
        for n in range(1, 5):
            assert 0.0 <= row[f"bleu{n}"] <= 1.0
    for cand, r, row in zip(cands, refs, rep.per_candidate):
        assert row["cider_d"] == pytest.approx(oracle_cider_d(cand, r, refs), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(sentences, refsets), min_size=2, max_size=5), st.randoms())
def test_per_candidate_scores_ignore_order(pairs, rnd):
    cands = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    base = evaluate(cands, refs).per_candidate
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    shuffled = evaluate([cands[i] for i in perm], [refs[i] for i in perm]).per_candidate
    for j, i in enumerate(perm):
        assert shuffled[j] == base[i]


def test_metrics_are_pure():
    a = evaluate(CANDIDATES, CORPUS).to_json()
    b = evaluate(CANDIDATES, CORPUS).to_json()
    assert a == b
