"""Sentence-level error counting and word correct rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class ErrorCounts:
    D: int = 0
    I: int = 0
    S: int = 0
    N: int = 0

    def __post_init__(self):
        if min(self.D, self.I, self.S, self.N) < 0:
            raise ValueError("error counts must be non-negative")
        if self.D + self.S > self.N:
            raise ValueError("deletions plus substitutions exceed the reference length")

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.D + other.D, self.I + other.I, self.S + other.S, self.N + other.N)

    @property
    def errors(self) -> int:
        return self.D + self.I + self.S

    def to_dict(self) -> dict:
        return {"D": self.D, "I": self.I, "S": self.S, "N": self.N}


def align(ref: Sequence[str], hyp: Sequence[str]) -> ErrorCounts:
    """Minimum edit alignment with unit costs.

    Among alignments of minimal total cost the one with the fewest
    substitutions wins, then the fewest insertions.
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, S, I, D); tuple order gives the tie-break directly
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, ins, d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, s, ins, d)
            else:
                diag = (c + 1, s + 1, ins, d)
            c, s, ins, d = prev[j]
            dele = (c + 1, s, ins, d + 1)
            c, s, ins, d = cur[j - 1]
            inse = (c + 1, s, ins + 1, d)
            cur.append(min(diag, dele, inse))
        prev = cur
    _, s, ins, d = prev[m]
    return ErrorCounts(D=d, I=ins, S=s, N=n)


def word_correct_rate(c: ErrorCounts) -> float:
    """``(N - D - I - S) / N``; negative when insertions dominate."""
    if c.N == 0:
        raise ValueError("word correct rate needs at least one reference sign")
    return (c.N - c.D - c.I - c.S) / c.N


def corpus_counts(pairs) -> ErrorCounts:
    total = ErrorCounts()
    for ref, hyp in pairs:
        total = total + align(ref, hyp)
    return total
