"""Greedy and beam-search caption generation.

Both work against any model exposing::

    prepare(X, mask) -> encoded scenes
    next_log_probs(encoded, prefixes (B, t) int array, rows (B,)) -> (B, V) array

Returned sequences hold word ids only: no start token, no end token.  A
hypothesis still running at ``max_len`` words is closed with a forced end
token that adds nothing to its score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .toyworld import END_ID, START_ID


def greedy_decode(model, X: np.ndarray, mask: np.ndarray, max_len: int) -> list[list[int]]:
    enc = model.prepare(X, mask)
    B = len(X)
    seqs: list[list[int]] = [[] for _ in range(B)]
    active = list(range(B))
    for _ in range(max_len):
        if not active:
            break
        prefixes = np.array([[START_ID] + seqs[b] for b in active], dtype=np.int64)
        lp = model.next_log_probs(enc, prefixes, np.array(active))
        nxt = lp.argmax(axis=-1)
        still = []
        for b, tok in zip(active, nxt.tolist()):
            if tok == END_ID:
                continue
            seqs[b].append(tok)
            still.append(b)
        active = still
    return seqs


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool = False


@dataclass
class Beam:
    width: int
    live: list[Hypothesis] = field(default_factory=lambda: [Hypothesis([], 0.0)])
    done: list[Hypothesis] = field(default_factory=list)

    def advance(self, log_probs: np.ndarray) -> None:
        """Expand every live hypothesis and keep the ``width`` best expansions."""
        totals = np.array([h.score for h in self.live])[:, None] + log_probs
        flat = totals.ravel()
        # stable order: ties resolved by (hypothesis, token) position, as argmax does
        order = np.argsort(-flat, kind="stable")[: self.width]
        V = log_probs.shape[1]
        nxt = []
        for idx in order.tolist():
            i, tok = divmod(idx, V)
            parent = self.live[i]
            if tok == END_ID:
                self.done.append(Hypothesis(parent.tokens, float(flat[idx]), True))
            else:
                nxt.append(Hypothesis(parent.tokens + [tok], float(flat[idx])))
        self.live = nxt

    def close(self) -> None:
        self.done.extend(Hypothesis(h.tokens, h.score, True) for h in self.live)
        self.live = []

    def best(self, length_normalization: bool = False) -> Hypothesis:
        key = (lambda h: h.score / (len(h.tokens) + 1)) if length_normalization else (lambda h: h.score)
        best = self.done[0]
        for h in self.done[1:]:
            if key(h) > key(best):
                best = h
        return best


def beam_search_scored(
    model,
    X: np.ndarray,
    mask: np.ndarray,
    width: int,
    max_len: int,
    length_normalization: bool = False,
) -> list[Hypothesis]:
    """Winning hypothesis (tokens and summed log-prob) per scene."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    enc = model.prepare(X, mask)
    out = []
    for b in range(len(X)):
        beam = Beam(width)
        for _ in range(max_len):
            prefixes = np.array([[START_ID] + h.tokens for h in beam.live], dtype=np.int64)
            beam.advance(model.next_log_probs(enc, prefixes, np.full(len(beam.live), b)))
            if not beam.live:
                break
        beam.close()
        out.append(beam.best(length_normalization))
    return out


def beam_search(model, X, mask, width: int, max_len: int, length_normalization: bool = False) -> list[list[int]]:
    return [h.tokens for h in beam_search_scored(model, X, mask, width, max_len, length_normalization)]
