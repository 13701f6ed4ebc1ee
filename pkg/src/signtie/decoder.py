"""Continuous sign decoding over a flat transition network.

Every sign contributes its left-to-right states.  Between the last state of
``u`` and the first state of ``v`` the path either runs through the
transition model ``CD(v|u)`` or, when the pair has none, takes a direct arc.
Cross-sign arcs carry ``scale * log P(v|u) + penalty``.

Decoding is time-synchronous Viterbi with four optional prunings: a state
beam against the frame best, a sign-exit beam, fast-match gating of sign
entries and look-ahead gating of transition-model entries.  With all of
them disabled the result is the exact network Viterbi path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .epenthesis import TransitionModel, interpolate_transition
from .frames import LAYOUT, N_STREAMS, GestureSequence
from .lm import BigramLM
from .tying import DensityBank, TiedModelSet, score_tables

log = logging.getLogger(__name__)

INF = math.inf


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class BeamConfig:
    """Pruning widths in log-score units; ``inf`` switches a pruning off.

    ``unit_threshold`` keeps signs whose fast-match score lies within that
    distance of the frame's best unit.  ``lookahead_beam`` keeps transition
    entries whose look-ahead score lies within that distance of the best
    entry at the same frame.
    """

    state_beam: float = INF
    sign_beam: float = INF
    unit_threshold: float = INF
    lookahead_beam: float = INF
    lookahead_depth: int = 3

    def __post_init__(self):
        for name in ("state_beam", "sign_beam", "unit_threshold", "lookahead_beam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lookahead_depth < 0:
            raise ValueError("look-ahead depth must be non-negative")

    @property
    def exact(self) -> bool:
        return all(math.isinf(b) for b in (self.state_beam, self.sign_beam,
                                           self.unit_threshold, self.lookahead_beam))


class DecodeNetwork:
    """Signs, transition models and LM arc weights ready for decoding.

    ``transitions`` may be ``None`` (direct arcs everywhere), ``"interpolate"``
    (an interpolated model for every pair), a mapping from ``(u, v)`` to
    :class:`TransitionModel`, or a ``(shared_models, pair_to_index)`` tuple as
    returned by transition tying.  With a mapping, pairs it does not cover
    fall back to the interpolated model.
    """

    def __init__(self, tms: TiedModelSet, lm: BigramLM, transitions=None):
        if set(lm.vocab) != set(tms.signs):
            raise ValueError("language model vocabulary differs from the sign set")
        self.tms = tms
        self.lm = lm
        V = len(tms)
        order = [lm.index[s] for s in tms.signs]
        start, big = lm.arc_weights()
        self.start_w = np.asarray(start)[order]
        self.arc_w = np.asarray(big)[np.ix_(order, order)]
        self.last = tms.n_states - 1
        self.log_exit = tms.log_fwd[np.arange(V), self.last]
        self._build_transitions(transitions)

    # -- transition models ---------------------------------------------------

    def _build_transitions(self, transitions) -> None:
        V = len(self.tms)
        models = self.tms.models
        self.cd_index = np.full((V, V), -1, dtype=np.int64)
        self.cd_models: list[TransitionModel] = []
        if transitions is None:
            self._finish_cd()
            return
        shared, pair_index = None, None
        if isinstance(transitions, tuple):
            shared, pair_index = transitions
        elif isinstance(transitions, Mapping):
            shared = []
            pair_index = {}
            for pair, tm in transitions.items():
                pair_index[tuple(pair)] = len(shared)
                shared.append(tm)
        elif transitions != "interpolate":
            raise ValueError("unsupported transition specification")
        if shared is not None:
            self.cd_models = list(shared)
            for (a, b), i in pair_index.items():
                if a in self.tms.index and b in self.tms.index:
                    self.cd_index[self.tms.index[a], self.tms.index[b]] = i
        for u in range(V):
            for v in range(V):
                if self.cd_index[u, v] < 0:
                    self.cd_index[u, v] = len(self.cd_models)
                    self.cd_models.append(interpolate_transition(models[u], models[v]))
        log.debug("network: %d signs, %d distinct transition models", V, len(self.cd_models))
        self._finish_cd()

    def _finish_cd(self) -> None:
        n = np.array([m.n_states for m in self.cd_models], dtype=np.int64)
        self.cd_states = n
        self.cd_offset = np.concatenate([[0], np.cumsum(n)]).astype(np.int64)
        self.C = int(n.max()) if len(n) else 1
        banks = []
        if self.cd_models:
            for s in range(N_STREAMS):
                banks.append(DensityBank.from_densities(
                    [st.streams[s] for m in self.cd_models for st in m.states]))
        self._cd_banks = banks
        V = len(self.tms)
        has = self.cd_index >= 0
        idx = np.maximum(self.cd_index, 0)
        C = self.C
        ls = np.zeros((V, V, C))
        lf = np.full((V, V, C), -np.inf)
        ns = np.zeros((V, V), dtype=np.int64)
        for i, m in enumerate(self.cd_models):
            sel = has & (idx == i)
            if not sel.any():
                continue
            ls[sel, : m.n_states] = m.log_self
            lf[sel, : m.n_states] = m.log_fwd
            ns[sel] = m.n_states
        self.has_cd = has
        self.cd_log_self = ls.reshape(V * V, C)
        self.cd_log_fwd = lf.reshape(V * V, C)
        self.cd_n = ns.reshape(V * V)

    @property
    def n_signs(self) -> int:
        return len(self.tms)

    def restrict(self, signs: Sequence[str]) -> "DecodeNetwork":
        """Sub-network over ``signs`` with a renormalized LM (transitions re-interpolated)."""
        idx = [self.tms.index[s] for s in signs]
        sub = TiedModelSet([self.tms.models[i] for i in idx], self.tms.codebook,
                           [self.tms.mapping[i, : self.tms.n_states[i]] for i in idx])
        trans = None
        if self.cd_models:
            trans = {(a, b): self.cd_models[self.cd_index[i, j]]
                     for i, a in zip(idx, signs) for j, b in zip(idx, signs)}
        return DecodeNetwork(sub, self.lm.restrict(signs), trans)

    # -- frame scores -----------------------------------------------------------

    def sign_emissions(self, frames, tables=None) -> np.ndarray:
        if tables is None:
            tables = score_tables(self.tms.codebook, frames)
        return self.tms.emissions(tables)

    def transition_emissions(self, frames, chunk_elems: int = 4_000_000) -> np.ndarray:
        """``(T, total transition states)`` state log-likelihoods."""
        frames = np.asarray(frames, dtype=np.float64)
        T = len(frames)
        if not self.cd_models:
            return np.zeros((T, 0))
        P = int(self.cd_offset[-1])
        out = np.zeros((T, P))
        for s, sl in enumerate(LAYOUT.slices):
            bank = self._cd_banks[s]
            per_frame = bank.means.size
            step = max(1, chunk_elems // max(per_frame, 1))
            for a in range(0, T, step):
                out[a:a + step] += bank.logpdf(frames[a:a + step, sl])
        return out


# -- fast match and look-ahead ------------------------------------------------------


def active_unit_scores(tables, tms: TiedModelSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit stream scores ``(T, U, 6)`` and their sums ``(T, U)``.

    The stream score of a unit is the best of its states' tied scores in
    that stream, so it costs table lookups only.
    """
    valid = tms.mapping[:, :, 0] >= 0
    idx = np.maximum(tms.mapping, 0)
    T = tables[0].shape[0]
    per = np.empty((T, len(tms), N_STREAMS))
    for s in range(N_STREAMS):
        v = tables[s][:, idx[:, :, s]]  # (T, U, S)
        v = np.where(valid[None], v, -np.inf)
        per[:, :, s] = v.max(axis=2)
    return per, per.sum(axis=2)


def active_units(combined: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean mask of units within ``threshold`` of the best unit (per row)."""
    if math.isinf(threshold):
        return np.ones(combined.shape, dtype=bool)
    best = combined.max(axis=-1, keepdims=True)
    return combined >= best - threshold


def _ahead(first: np.ndarray, depth: int) -> np.ndarray:
    """``(T, V)`` mean of ``first`` over the next ``depth`` frames (0 when none)."""
    T = len(first)
    out = np.zeros_like(first)
    if depth == 0:
        return out
    c = np.vstack([np.zeros((1,) + first.shape[1:]), np.cumsum(first, axis=0)])
    for t in range(T - 1):
        hi = min(t + depth, T - 1)
        out[t] = (c[hi + 1] - c[t + 1]) / (hi - t)
    return out


def lookahead_score(sign_emis: np.ndarray, n_states, u: int, v: int, t: int, depth: int = 3) -> float:
    """Look-ahead score of entering the transition ``u -> v`` at frame ``t``.

    ``sign_emis`` is the ``(U, T, S)`` emission array.  The score averages
    ``u``'s last-state and ``v``'s first-state log-likelihoods at ``t`` and
    adds ``v``'s mean first-state log-likelihood over frames
    ``t+1 .. min(t+depth, T-1)``.
    """
    T = sign_emis.shape[1]
    p_u = sign_emis[u, t, int(n_states[u]) - 1]
    p_v = sign_emis[v, t, 0]
    hi = min(t + depth, T - 1)
    ahead = sign_emis[v, t + 1:hi + 1, 0].mean() if hi > t else 0.0
    return float(0.5 * (p_u + p_v) + ahead)


# -- results -----------------------------------------------------------------------


@dataclass
class PruneStats:
    states_pruned: int = 0
    exits_blocked: int = 0
    entries_gated: int = 0
    lookahead_gated: int = 0
    peak_active: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Hypothesis:
    """Final token: score, its network position and the back-pointer chain."""

    score: float
    sign: str
    state: int
    chain: tuple[tuple[str, int], ...]  # (sign, end frame) in order


@dataclass(frozen=True)
class DecodeResult:
    signs: tuple[str, ...]
    segments: tuple[tuple[str, int, int], ...]  # (sign, first frame, last frame)
    score: float
    hypothesis: Hypothesis
    stats: PruneStats = field(default_factory=PruneStats)


class _Records:
    """Append-only back-pointer store; ids are positions."""

    def __init__(self):
        self.sign: list[np.ndarray] = []
        self.frame: list[np.ndarray] = []
        self.parent: list[np.ndarray] = []
        self.n = 0

    def add(self, sign: np.ndarray, frame: int, parent: np.ndarray) -> np.ndarray:
        k = len(sign)
        ids = np.arange(self.n, self.n + k, dtype=np.int64)
        self.sign.append(np.asarray(sign, dtype=np.int64))
        self.frame.append(np.full(k, frame, dtype=np.int64))
        self.parent.append(np.asarray(parent, dtype=np.int64))
        self.n += k
        return ids

    def freeze(self):
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64))
        return cat(self.sign), cat(self.frame), cat(self.parent)


# -- decoding ------------------------------------------------------------------------


def decode(seq, net: DecodeNetwork, beams: BeamConfig = BeamConfig(),
           emissions: tuple[np.ndarray, np.ndarray] | None = None) -> DecodeResult:
    """Best sign sequence, its segmentation and total log score.

    The sentence ends in the last state of some sign; no end-of-sentence
    LM term is applied.  Ties go to the lower sign index and then to the
    earlier boundary.
    """
    frames = seq.frames if isinstance(seq, GestureSequence) else np.asarray(seq, dtype=np.float64)
    T = len(frames)
    if T == 0:
        raise DecodeError("empty sequence")
    tms = net.tms
    V = net.n_signs
    S = tms.log_self.shape[1]
    tables = score_tables(tms.codebook, frames)
    if emissions is None:
        sign_emis = tms.emissions(tables)
        cd_emis = net.transition_emissions(frames)
    else:
        sign_emis, cd_emis = emissions
    has_cd = net.has_cd
    any_cd = bool(has_cd.any())
    direct = ~has_cd
    if any_cd:
        # (T, V*V, C) view builder: column of state c of the pair's model
        pair_off = net.cd_offset[np.maximum(net.cd_index, 0)].reshape(V * V)
        cols = pair_off[:, None] + np.arange(net.C)[None, :]
        cols = np.minimum(cols, max(cd_emis.shape[1] - 1, 0))
        cd_valid = np.arange(net.C)[None, :] < net.cd_n[:, None]
        cd_last = np.maximum(net.cd_n - 1, 0)
        cd_exit_w = net.cd_log_fwd[np.arange(V * V), cd_last]

    stats = PruneStats()
    fast = not math.isinf(beams.unit_threshold)
    if fast:
        _, combined = active_unit_scores(tables, tms)
        active = active_units(combined, beams.unit_threshold)
    use_la = any_cd and not math.isinf(beams.lookahead_beam)
    if use_la:
        first = sign_emis[:, :, 0].T  # (T, V)
        last_e = sign_emis[np.arange(V), :, net.last].T  # (T, V)
        ahead = _ahead(first, beams.lookahead_depth)

    rec = _Records()
    sc = np.full((V, S), -np.inf)
    sh = np.full((V, S), -1, dtype=np.int64)
    if any_cd:
        cs = np.full((V * V, net.C), -np.inf)
        ch = np.full((V * V, net.C), -1, dtype=np.int64)
    prev_best = 0.0
    for t in range(T):
        if t == 0:
            entry = net.start_w.copy()
            entry_parent = np.full(V, -1, dtype=np.int64)
            cd_entry = None
        else:
            exit_sc = sc[np.arange(V), net.last] + net.log_exit
            ok = np.isfinite(exit_sc)
            if not math.isinf(beams.sign_beam):
                blocked = ok & (exit_sc < prev_best - beams.sign_beam)
                stats.exits_blocked += int(blocked.sum())
                ok &= ~blocked
            exit_sc = np.where(ok, exit_sc, -np.inf)
            exit_ids = np.full(V, -1, dtype=np.int64)
            live = np.flatnonzero(ok)
            if len(live):
                exit_ids[live] = rec.add(live, t - 1, sh[live, net.last[live]])
            cross = exit_sc[:, None] + net.arc_w  # (u, v)
            cand = np.where(direct, cross, -np.inf)
            cand_hist = np.broadcast_to(exit_ids[:, None], (V, V)).copy()
            cd_entry = None
            if any_cd:
                cd_entry = np.where(has_cd, cross, -np.inf)
                if use_la:
                    la = 0.5 * (last_e[t][:, None] + first[t][None, :]) + ahead[t][None, :]
                    la = np.where(np.isfinite(cd_entry), la, -np.inf)
                    top = la.max()
                    if np.isfinite(top):
                        gate = np.isfinite(cd_entry) & (la < top - beams.lookahead_beam)
                        stats.lookahead_gated += int(gate.sum())
                        cd_entry = np.where(gate, -np.inf, cd_entry)
                cd_out = cs[np.arange(V * V), cd_last] + cd_exit_w
                cd_out = np.where(has_cd.reshape(-1), cd_out, -np.inf).reshape(V, V)
                take = cd_out > cand
                cand = np.where(take, cd_out, cand)
                cand_hist = np.where(take, ch[np.arange(V * V), cd_last].reshape(V, V), cand_hist)
            win = cand.argmax(axis=0)  # lowest u on ties
            entry = cand[win, np.arange(V)]
            entry_parent = cand_hist[win, np.arange(V)]
        if fast:
            gated = np.isfinite(entry) & ~active[t]
            stats.entries_gated += int(gated.sum())
            entry = np.where(active[t], entry, -np.inf)
        entry_ids = np.full(V, -1, dtype=np.int64)
        live = np.flatnonzero(np.isfinite(entry))
        if len(live):
            entry_ids[live] = rec.add(live, t, entry_parent[live])
        if any_cd and t > 0:
            e_cd = cd_emis[t][cols]
            e_cd = np.where(cd_valid, e_cd, -np.inf)
            cd_hist_in = np.broadcast_to(exit_ids[:, None], (V, V)).reshape(-1)
            cs, ch, _ = kernels.lr_step(cs, ch, cd_entry.reshape(-1), np.ascontiguousarray(cd_hist_in),
                                        e_cd, net.cd_log_self, net.cd_log_fwd, net.cd_n)
        sc, sh, _ = kernels.lr_step(sc, sh, entry, entry_ids, np.ascontiguousarray(sign_emis[:, t, :]),
                                    tms.log_self, tms.log_fwd, tms.n_states)
        best = sc.max()
        if any_cd and t > 0:
            best = max(best, cs.max())
        if not np.isfinite(best):
            raise DecodeError(f"every hypothesis was pruned at frame {t}; widen the beams")
        if not math.isinf(beams.state_beam):
            floor = best - beams.state_beam
            cut = np.isfinite(sc) & (sc < floor)
            n_cut = int(cut.sum())
            sc[cut] = -np.inf
            if any_cd and t > 0:
                cut_cd = np.isfinite(cs) & (cs < floor)
                n_cut += int(cut_cd.sum())
                cs[cut_cd] = -np.inf
            stats.states_pruned += n_cut
        n_act = int(np.isfinite(sc).sum()) + (int(np.isfinite(cs).sum()) if any_cd else 0)
        stats.peak_active = max(stats.peak_active, n_act)
        prev_best = best

    final = sc[np.arange(V), net.last]
    u = int(np.argmax(final))
    score = float(final[u])
    if not np.isfinite(score):
        raise DecodeError("no sign can end at the last frame; the sequence is too short or over-pruned")
    r_sign, r_frame, r_parent = rec.freeze()
    segs = []
    end = T - 1
    node = int(sh[u, net.last[u]])
    while node >= 0:
        s = int(r_sign[node])
        segs.append((tms.signs[s], int(r_frame[node]), end))
        node = int(r_parent[node])
        if node < 0:
            break
        end = int(r_frame[node])
        node = int(r_parent[node])
    segs.reverse()
    signs = tuple(s for s, _, _ in segs)
    chain = tuple((s, e) for s, _, e in segs)
    hyp = Hypothesis(score, tms.signs[u], int(net.last[u]), chain)
    return DecodeResult(signs, tuple(segs), score, hyp, stats)


def decode_corpus(seqs, net: DecodeNetwork, beams: BeamConfig = BeamConfig()) -> list[DecodeResult | None]:
    """Decode many sentences; ``None`` marks a sentence that failed to decode."""
    out = []
    for s in seqs:
        try:
            out.append(decode(s, net, beams))
        except DecodeError as exc:
            log.warning("decode failed: %s", exc)
            out.append(None)
    return out
