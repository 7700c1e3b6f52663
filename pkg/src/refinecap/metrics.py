"""Caption metrics written from scratch: BLEU-1..4, ROUGE-L and CIDEr-D.

All functions take pre-tokenized sequences (lists of str) and are pure.
CIDEr-D follows the COCO-caption formulation: tf-idf n-gram vectors for
n = 1..4, reference-clipped dot products, a Gaussian length penalty with
sigma = 6, scaled by 10.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

Tokens = Sequence[str]
MAX_N = 4


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class NGramStats:
    """n-gram multisets for n = 1..max_n of one token sequence."""

    counts: list[Counter]
    length: int

    @classmethod
    def of(cls, tokens: Tokens, max_n: int = MAX_N) -> "NGramStats":
        return cls([ngram_counts(tokens, n) for n in range(1, max_n + 1)], len(tokens))


# --------------------------------------------------------------------------
# BLEU


@dataclass
class BleuResult:
    corpus: list[float]
    per_candidate: list[list[float]]
    empty_candidates: list[int] = field(default_factory=list)


def _closest_ref_len(c: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _bleu_from_counts(matches, totals, c, r, max_n) -> list[float]:
    out = []
    log_sum = 0.0
    bp = 1.0 if c >= r or c == 0 else math.exp(1.0 - r / c)
    dead = False
    for n in range(max_n):
        if dead or totals[n] == 0 or matches[n] == 0:
            dead = True
            out.append(0.0)
            continue
        log_sum += math.log(matches[n] / totals[n])
        out.append(bp * math.exp(log_sum / (n + 1)))
    return out


def bleu(candidates: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]], max_n: int = MAX_N) -> BleuResult:
    """Corpus BLEU-1..max_n plus per-candidate sentence BLEU.

    Clipped n-gram precision, geometric mean over 1..n, brevity penalty
    with the closest-reference-length convention (ties go to the shorter
    reference).  Empty candidates score 0 and are listed in
    ``empty_candidates``.
    """
    if len(candidates) != len(reference_sets):
        raise ValueError("candidates and reference_sets differ in length")
    tot_match = [0] * max_n
    tot_count = [0] * max_n
    tot_c = tot_r = 0
    per, empty = [], []
    for i, (cand, refs) in enumerate(zip(candidates, reference_sets)):
        if not refs:
            raise ValueError(f"candidate {i} has no references")
        if len(cand) == 0:
            empty.append(i)
        matches, totals = [], []
        for n in range(1, max_n + 1):
            cc = ngram_counts(cand, n)
            max_ref: Counter = Counter()
            for ref in refs:
                for g, k in ngram_counts(ref, n).items():
                    if k > max_ref[g]:
                        max_ref[g] = k
            matches.append(sum(min(k, max_ref[g]) for g, k in cc.items()))
            totals.append(max(0, len(cand) - n + 1))
        r = _closest_ref_len(len(cand), (len(ref) for ref in refs))
        per.append(_bleu_from_counts(matches, totals, len(cand), r, max_n))
        for n in range(max_n):
            tot_match[n] += matches[n]
            tot_count[n] += totals[n]
        tot_c += len(cand)
        tot_r += r
    return BleuResult(_bleu_from_counts(tot_match, tot_count, tot_c, tot_r, max_n), per, empty)


# --------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference_set: Sequence[Tokens], beta: float = 1.2) -> float:
    """LCS F-measure; precision and recall are each maximized over references."""
    if not candidate or not reference_set:
        return 0.0
    precs, recs = [], []
    for ref in reference_set:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        precs.append(lcs / len(candidate))
        recs.append(lcs / len(ref))
    if not precs:
        return 0.0
    p, r = max(precs), max(recs)
    if p == 0.0 or r == 0.0:
        return 0.0
    return ((1 + beta**2) * p * r) / (r + beta**2 * p)


# --------------------------------------------------------------------------
# CIDEr-D


class CorpusIdf:
    """Document frequencies of n-grams over a corpus of reference sets.

    A document is one scene's reference set; an n-gram counts once per
    document however many references contain it.
    """

    def __init__(self, reference_sets: Iterable[Sequence[Tokens]], max_n: int = MAX_N):
        self.max_n = max_n
        self.df: Counter = Counter()
        n_docs = 0
        for refs in reference_sets:
            n_docs += 1
            seen = set()
            for ref in refs:
                for n in range(1, max_n + 1):
                    seen.update(ngram_counts(ref, n))
            self.df.update(seen)
        if n_docs == 0:
            raise ValueError("CorpusIdf needs at least one reference set")
        self.n_docs = n_docs
        self.log_n = math.log(n_docs)

    def idf(self, gram: tuple[str, ...]) -> float:
        # unseen n-grams get the maximal weight log(N / 1)
        return self.log_n - math.log(max(1.0, self.df.get(gram, 0)))


def _tfidf(tokens: Tokens, idf: CorpusIdf) -> list[dict]:
    return [{g: k * idf.idf(g) for g, k in ngram_counts(tokens, n).items()} for n in range(1, idf.max_n + 1)]


def _sq_norm(vec: dict) -> float:
    return sum(v * v for v in vec.values())


def _cider_pair(cand_vecs, cand_sq, cand_len, ref_vecs, ref_sq, ref_len, sigma) -> list[float]:
    penalty = math.exp(-((cand_len - ref_len) ** 2) / (2.0 * sigma**2))
    out = []
    for cv, cs, rv, rs in zip(cand_vecs, cand_sq, ref_vecs, ref_sq):
        if cs == 0.0 or rs == 0.0:
            out.append(0.0)
            continue
        dot = 0.0
        for g, w in cv.items():
            rw = rv.get(g)
            if rw is not None:
                dot += min(w, rw) * rw
        # sqrt(cs * rs) == cs exactly when the vectors coincide
        out.append(dot / math.sqrt(cs * rs) * penalty)
    return out


def cider_d(
    candidates: Sequence[Tokens],
    reference_sets: Sequence[Sequence[Tokens]],
    idf: CorpusIdf | None = None,
    sigma: float = 6.0,
) -> list[float]:
    """Per-candidate CIDEr-D in [0, 10].

    ``idf`` defaults to document frequencies over ``reference_sets`` itself.
    """
    if len(candidates) != len(reference_sets):
        raise ValueError("candidates and reference_sets differ in length")
    if idf is None:
        idf = CorpusIdf(reference_sets)
    scores = []
    for cand, refs in zip(candidates, reference_sets):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cv = _tfidf(cand, idf)
        cs = [_sq_norm(v) for v in cv]
        acc = [0.0] * idf.max_n
        for ref in refs:
            rv = _tfidf(ref, idf)
            rs = [_sq_norm(v) for v in rv]
            for n, s in enumerate(_cider_pair(cv, cs, len(cand), rv, rs, len(ref), sigma)):
                acc[n] += s
        per_n = [a / len(refs) for a in acc]
        scores.append(10.0 * sum(per_n) / idf.max_n)
    return scores


# --------------------------------------------------------------------------
# reports

METRIC_NAMES = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider_d")


@dataclass
class MetricReport:
    per_candidate: list[dict[str, float]]
    corpus: dict[str, float]

    def to_json(self) -> dict:
        return {"per_candidate": self.per_candidate, "corpus": self.corpus}


def evaluate(
    candidates: Sequence[Tokens],
    reference_sets: Sequence[Sequence[Tokens]],
    idf: CorpusIdf | None = None,
    ids: Sequence[str] | None = None,
) -> MetricReport:
    b = bleu(candidates, reference_sets)
    rouge = [rouge_l(c, r) for c, r in zip(candidates, reference_sets)]
    cider = cider_d(candidates, reference_sets, idf)
    per = []
    for i in range(len(candidates)):
        row: dict = {} if ids is None else {"id": ids[i]}
        row.update({f"bleu{n + 1}": b.per_candidate[i][n] for n in range(MAX_N)})
        row["rouge_l"] = rouge[i]
        row["cider_d"] = cider[i]
        per.append(row)
    n = max(len(candidates), 1)
    corpus = {f"bleu{k + 1}": b.corpus[k] for k in range(MAX_N)}
    corpus["rouge_l"] = sum(rouge) / n
    corpus["cider_d"] = sum(cider) / n
    return MetricReport(per, corpus)
