"""Isolated sign recognition with start-state candidate gating.

Signs are grouped per stream by the tied pattern of their first state.  The
first few frames of an utterance give a posterior over those start patterns;
a stream activates every sign subset whose start pattern is probable enough,
and only signs active in all six streams receive a full Viterbi match.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .frames import N_STREAMS, GestureSequence
from .hmm import LOG_FLOOR
from .tying import OpCounter, TiedCodebook, TiedModelSet, score_tables

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GateConfig:
    tau: float = 1e-3
    start_frames: int = 3

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("posterior threshold must lie in [0, 1]")
        if self.start_frames < 1:
            raise ValueError("need at least one start frame")


@dataclass(frozen=True)
class StartCodebook:
    """Per stream: the start-state codewords and the sign subset of each.

    ``codewords[k]`` is the sorted array of pattern indices used by some
    sign's first state in stream ``k``; ``subsets[k][i]`` holds the sign
    indices whose first-state pattern is ``codewords[k][i]``.
    """

    codewords: tuple[np.ndarray, ...]
    subsets: tuple[tuple[np.ndarray, ...], ...]
    n_signs: int

    def subset(self, k: int, pattern: int) -> np.ndarray:
        i = int(np.searchsorted(self.codewords[k], pattern))
        if i >= len(self.codewords[k]) or self.codewords[k][i] != pattern:
            return np.zeros(0, dtype=np.int64)
        return self.subsets[k][i]

    def to_dict(self) -> dict:
        return {"codewords": [c.tolist() for c in self.codewords],
                "subsets": [[s.tolist() for s in sub] for sub in self.subsets],
                "n_signs": self.n_signs}

    @classmethod
    def from_dict(cls, d: dict) -> "StartCodebook":
        return cls(tuple(np.array(c, dtype=np.int64) for c in d["codewords"]),
                   tuple(tuple(np.array(s, dtype=np.int64) for s in sub) for sub in d["subsets"]),
                   d["n_signs"])


def build_subsets(tms: TiedModelSet) -> StartCodebook:
    first = tms.mapping[:, 0, :]  # (U, 6)
    codewords, subsets = [], []
    for k in range(N_STREAMS):
        cw, inv = np.unique(first[:, k], return_inverse=True)
        codewords.append(cw.astype(np.int64))
        subsets.append(tuple(np.flatnonzero(inv == i) for i in range(len(cw))))
    return StartCodebook(tuple(codewords), tuple(subsets), len(tms))


def _log_posteriors(loglik: np.ndarray) -> np.ndarray:
    top = loglik.max(axis=-1, keepdims=True)
    return loglik - top - np.log(np.exp(loglik - top).sum(axis=-1, keepdims=True))


def codeword_posteriors(o_k, k: int, cb: StartCodebook, codebook: TiedCodebook) -> np.ndarray:
    """Posterior of each start codeword of stream ``k`` given one stream vector.

    Ordered like ``cb.codewords[k]``.  When every likelihood sits at the
    log floor the result is uniform.
    """
    ll = codebook.banks[k].logpdf(np.asarray(o_k, dtype=np.float64))[cb.codewords[k]]
    if np.all(ll <= LOG_FLOOR):
        log.warning("stream %d: all codeword likelihoods underflow; using a uniform posterior", k)
        return np.full(len(ll), 1.0 / len(ll))
    return np.exp(_log_posteriors(ll))


@dataclass(frozen=True)
class CandidateSet:
    ids: np.ndarray  # sorted sign indices
    fallback: bool
    per_stream: tuple[np.ndarray, ...]


def _averaged_log_posteriors(tables, cb: StartCodebook, F: int) -> list[np.ndarray]:
    out = []
    for k in range(N_STREAMS):
        ll = tables[k][:F][:, cb.codewords[k]]
        lp = _log_posteriors(ll)
        # arithmetic mean of the posteriors, evaluated in the log domain
        out.append(np.logaddexp.reduce(lp, axis=0) - np.log(len(lp)))
    return out


def active_candidates(seq, cb: StartCodebook, codebook: TiedCodebook, cfg: GateConfig = GateConfig(),
                      tables=None) -> CandidateSet:
    """Signs active in every stream (WordCD); the full vocabulary if none are."""
    frames = seq.frames if isinstance(seq, GestureSequence) else np.asarray(seq)
    F = min(cfg.start_frames, len(frames))
    if tables is None:
        tables = score_tables(codebook, frames[:F])
    avg = _averaged_log_posteriors(tables, cb, F)
    log_tau = np.log(cfg.tau) if cfg.tau > 0 else -np.inf
    active = np.ones(cb.n_signs, dtype=bool)
    per_stream = []
    for k in range(N_STREAMS):
        on = np.zeros(cb.n_signs, dtype=bool)
        for i in np.flatnonzero(avg[k] > log_tau):
            on[cb.subsets[k][i]] = True
        per_stream.append(np.flatnonzero(on))
        active &= on
    ids = np.flatnonzero(active)
    if len(ids) == 0:
        log.debug("empty candidate intersection; falling back to the full vocabulary")
        return CandidateSet(np.arange(cb.n_signs), True, tuple(per_stream))
    return CandidateSet(ids, False, tuple(per_stream))


def tied_viterbi_scores(tms: TiedModelSet, tables, units, counter: OpCounter | None = None,
                        shared_prefix: bool = False) -> np.ndarray:
    units = np.asarray(units, dtype=np.int64)
    if shared_prefix:
        emis = tms.shared_prefix_emissions(tables, units, counter)
    else:
        emis = tms.emissions(tables, units, counter)
    if counter is not None:
        counter.viterbi_evals += len(units)
    return kernels.viterbi_lr_batch(emis, tms.n_states[units], tms.log_self[units], tms.log_fwd[units])


def recognize_isolated(seq, tms: TiedModelSet, cb: StartCodebook | None = None,
                       cfg: GateConfig | None = GateConfig(), n_best: int = 1,
                       counter: OpCounter | None = None, shared_prefix: bool = False):
    """Ranked ``(sign, score)`` list for one utterance.

    ``cfg=None`` (or ``cb=None``) disables gating.  Ties are broken by sign
    index.  An empty list means no candidate can be traversed in ``T``
    frames.
    """
    frames = seq.frames if isinstance(seq, GestureSequence) else np.asarray(seq)
    tables = score_tables(tms.codebook, frames, counter)
    if cb is None or cfg is None:
        units = np.arange(len(tms))
    else:
        units = active_candidates(frames, cb, tms.codebook, cfg, tables).ids
    scores = tied_viterbi_scores(tms, tables, units, counter, shared_prefix)
    ok = np.isfinite(scores)
    if not ok.any():
        log.warning("sequence of %d frames is infeasible for every candidate", len(frames))
        return []
    units, scores = units[ok], scores[ok]
    order = np.lexsort((units, -scores))[:n_best]
    return [(tms.signs[units[i]], float(scores[i])) for i in order]


@dataclass
class IsolatedEval:
    accuracy: float
    n: int
    viterbi_evals: int
    recall: float
    mean_candidates: float
    fallbacks: int


def evaluate_isolated(seqs, tms: TiedModelSet, cb: StartCodebook | None = None,
                      cfg: GateConfig | None = None) -> IsolatedEval:
    counter = OpCounter()
    correct = hits = fallbacks = 0
    n_cand = 0
    for s in seqs:
        tables = score_tables(tms.codebook, s.frames)
        if cb is None or cfg is None:
            units = np.arange(len(tms))
        else:
            cs = active_candidates(s, cb, tms.codebook, cfg, tables)
            units = cs.ids
            fallbacks += cs.fallback
        hits += tms.index[s.label] in set(units.tolist())
        n_cand += len(units)
        sc = tied_viterbi_scores(tms, tables, units, counter)
        if np.isfinite(sc).any():
            order = np.lexsort((units, -sc))
            correct += tms.signs[units[order[0]]] == s.label
    n = len(seqs)
    return IsolatedEval(correct / n, n, counter.viterbi_evals, hits / n, n_cand / n, fallbacks)
