"""Bigram language model over sign ids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class BigramLM:
    """Conditional sign probabilities with a sentence-start context.

    ``log_probs[i, j]`` is ``log P(vocab[j] | vocab[i])`` and ``log_start[j]``
    is ``log P(vocab[j] | <s>)``.  ``scale`` multiplies every LM log-prob and
    ``penalty`` is added once per sign on cross-sign arcs.
    """

    vocab: tuple[str, ...]
    log_probs: np.ndarray
    log_start: np.ndarray
    scale: float = 1.0
    penalty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        V = len(self.vocab)
        if V == 0:
            raise ValueError("empty vocabulary")
        lp = np.array(self.log_probs, dtype=np.float64).reshape(V, V)
        ls = np.array(self.log_start, dtype=np.float64).reshape(V)
        for row in np.vstack([lp, ls[None]]):
            if abs(np.exp(row).sum() - 1.0) > 1e-9:
                raise ValueError("bigram rows must sum to one")
        lp.flags.writeable = False
        ls.flags.writeable = False
        object.__setattr__(self, "log_probs", lp)
        object.__setattr__(self, "log_start", ls)

    @property
    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.vocab)}

    def prob(self, v: str, u: str | None = None) -> float:
        idx = self.index
        if u is None:
            return float(np.exp(self.log_start[idx[v]]))
        return float(np.exp(self.log_probs[idx[u], idx[v]]))

    def arc_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Scaled cross-sign weights ``(start (V,), bigram (V, V))`` incl. penalty."""
        with np.errstate(invalid="ignore"):
            start = self.scale * self.log_start + self.penalty
            big = self.scale * self.log_probs + self.penalty
        return start, big

    def with_weights(self, scale: float = 1.0, penalty: float = 0.0) -> "BigramLM":
        return BigramLM(self.vocab, self.log_probs, self.log_start, scale, penalty)

    def restrict(self, vocab: Sequence[str]) -> "BigramLM":
        """Renormalized sub-model over a subset of the vocabulary."""
        idx = [self.index[w] for w in vocab]
        lp = self.log_probs[np.ix_(idx, idx)]
        lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
        ls = self.log_start[idx]
        ls = ls - np.logaddexp.reduce(ls)
        return BigramLM(tuple(vocab), lp, ls, self.scale, self.penalty)

    @classmethod
    def from_probs(cls, vocab, probs, start=None, **kw) -> "BigramLM":
        probs = np.asarray(probs, dtype=np.float64)
        V = len(vocab)
        start = np.full(V, 1.0 / V) if start is None else np.asarray(start, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(tuple(vocab), np.log(probs), np.log(start), **kw)

    @classmethod
    def uniform(cls, vocab) -> "BigramLM":
        V = len(vocab)
        return cls.from_probs(vocab, np.full((V, V), 1.0 / V))

    def to_dict(self) -> dict:
        return {"vocab": list(self.vocab),
                "log_probs": self.log_probs.tolist(),
                "log_start": self.log_start.tolist(),
                "scale": self.scale, "penalty": self.penalty}

    @classmethod
    def from_dict(cls, d: dict) -> "BigramLM":
        return cls(tuple(d["vocab"]), np.array(d["log_probs"]), np.array(d["log_start"]),
                   d["scale"], d["penalty"])


def estimate_bigram(corpus: Iterable[Sequence[str]], vocab: Sequence[str]) -> BigramLM:
    """Add-one smoothed bigram estimate from sign sequences."""
    vocab = tuple(vocab)
    if not vocab:
        raise ValueError("empty vocabulary")
    idx = {w: i for i, w in enumerate(vocab)}
    V = len(vocab)
    counts = np.zeros((V, V))
    start = np.zeros(V)
    for sent in corpus:
        ids = [idx[w] for w in sent]
        if not ids:
            continue
        start[ids[0]] += 1
        for a, b in zip(ids, ids[1:]):
            counts[a, b] += 1
    probs = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + V)
    p0 = (start + 1.0) / (start.sum() + V)
    return BigramLM(vocab, np.log(probs), np.log(p0))
