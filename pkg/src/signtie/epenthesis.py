"""Movement-epenthesis (sign transition) models.

A transition model ``CD(v|u)`` sits between the last state of sign ``u`` and
the first state of sign ``v``.  The cheap construction averages those two
states; with sentence data the models are re-estimated by EM on the linked
HMM ``u -> CD(v|u) -> v -> ...`` while every sign model stays frozen.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .frames import LAYOUT, N_STREAMS, GestureSequence, StreamLayout, split_streams
from .hmm import (VAR_FLOOR, SignHMM, StateModel, StreamDensity, safe_log,
                  state_log_likelihood)
from .tying import TyingWarning, cluster_densities, merge_densities

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransitionModel:
    """Left-to-right no-skip HMM for the transition from ``u`` to ``v``.

    Entry from the last state of ``u`` carries probability one; the final
    state's forward probability leads into the first state of ``v``.
    """

    pair: tuple[str, str]
    states: tuple[StateModel, ...]
    self_loop: np.ndarray
    entry_log_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pair", tuple(self.pair))
        object.__setattr__(self, "states", tuple(self.states))
        a = np.array(self.self_loop, dtype=np.float64).reshape(-1)
        if len(a) != len(self.states) or len(a) not in (1, 3):
            raise ValueError("transition models have 1 or 3 states")
        if self.entry_log_prob != 0.0:
            raise ValueError("transition entry probability is fixed to 1")
        if np.any(a < 0) or np.any(a >= 1):
            raise ValueError("self-loop probabilities must lie in [0, 1)")
        a.flags.writeable = False
        object.__setattr__(self, "self_loop", a)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def log_self(self) -> np.ndarray:
        return safe_log(self.self_loop)

    @property
    def log_fwd(self) -> np.ndarray:
        return safe_log(1.0 - self.self_loop)

    def emissions(self, frames, layout: StreamLayout = LAYOUT) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        return np.stack([state_log_likelihood(s, frames, layout) for s in self.states], axis=1)

    def with_pair(self, pair) -> "TransitionModel":
        return TransitionModel(tuple(pair), self.states, self.self_loop)

    def to_dict(self) -> dict:
        return {"pair": list(self.pair), "self_loop": self.self_loop.tolist(),
                "states": [s.to_dict() for s in self.states]}

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionModel":
        return cls(tuple(d["pair"]), tuple(StateModel.from_dict(s) for s in d["states"]),
                   np.array(d["self_loop"]))


def average_states(a: StateModel, b: StateModel) -> StateModel:
    """Component-wise average of two state models (means and variances)."""
    streams = []
    for da, db in zip(a.streams, b.streams):
        if da.n_mix != db.n_mix:
            raise ValueError(f"mixture size mismatch: {da.n_mix} vs {db.n_mix}")
        streams.append(StreamDensity(0.5 * (da.weights + db.weights),
                                     0.5 * (da.means + db.means),
                                     0.5 * (da.variances + db.variances)))
    return StateModel(tuple(streams))


def interpolate_transition(u: SignHMM, v: SignHMM, self_loop: float | None = None) -> TransitionModel:
    """One-state transition model halfway between ``u``'s last and ``v``'s first state.

    The self-loop defaults to the mean of the two source states' self-loops.
    """
    state = average_states(u.states[-1], v.states[0])
    if self_loop is None:
        self_loop = 0.5 * (u.self_loop[-1] + v.self_loop[0])
    self_loop = min(float(self_loop), 0.99)
    return TransitionModel((u.sign, v.sign), (state,), np.array([self_loop]))


def replicate_states(tm: TransitionModel, n_states: int) -> TransitionModel:
    """Expand a one-state model to ``n_states`` identical states."""
    if tm.n_states == n_states:
        return tm
    if tm.n_states != 1:
        raise ValueError("can only replicate a one-state model")
    # keep the expected dwell of the whole model unchanged
    a = float(tm.self_loop[0])
    dwell = 1.0 / (1.0 - a)
    per = max(dwell / n_states, 1.0 + 1e-3)
    a_n = 1.0 - 1.0 / per
    return TransitionModel(tm.pair, (tm.states[0],) * n_states, np.full(n_states, a_n))


# -- training on sentences -----------------------------------------------------


@dataclass
class TransitionTrainingReport:
    history: list
    occupancy: dict
    untrained: list


def _chain(signs: Sequence[str], models: Mapping[str, SignHMM],
           trans: Mapping[tuple[str, str], TransitionModel]):
    """Linked chain for one sentence: list of (kind, key, state) plus transitions."""
    units = []
    for i, w in enumerate(signs):
        if i > 0:
            units.append(("cd", (signs[i - 1], w)))
        units.append(("sign", w))
    states, ls, lf = [], [], []
    for kind, key in units:
        m = models[key] if kind == "sign" else trans[key]
        for j in range(m.n_states):
            states.append((kind, key, j))
        ls.extend(m.log_self)
        lf.extend(m.log_fwd)
    return states, np.array(ls), np.array(lf)


def train_transitions(sentences: Sequence[GestureSequence], signs: Mapping[str, SignHMM] | Sequence[SignHMM],
                      n_states: int = 1, init: Mapping[tuple[str, str], TransitionModel] | None = None,
                      max_iter: int = 10, rel_tol: float = 1e-4, var_floor: float = VAR_FLOOR,
                      min_occupancy: float = 0.0, prior_weight: float = 0.0,
                      train_transitions_probs: bool = True, layout: StreamLayout = LAYOUT):
    """Re-estimate transition models on labeled sentences; sign models are frozen.

    Returns ``(models, report)``.  ``models`` covers every adjacent pair seen
    in the sentences plus every pair of ``init``.  Pairs whose total occupancy stays below
    ``min_occupancy`` keep their initial parameters (listed in
    ``report.untrained``).  ``report.history`` is the linked-HMM
    log-likelihood before each update and after the last one.

    ``prior_weight`` > 0 turns the update into a MAP estimate that treats the
    initial model as ``prior_weight`` frames of pseudo-data (one pseudo
    transition for the self-loop).  Sparse pairs then stay close to their
    initialization.  With a prior the likelihood is no longer guaranteed to
    rise every iteration; the penalized objective is.
    """
    if n_states not in (1, 3):
        raise ValueError("transition models have 1 or 3 states")
    if prior_weight < 0:
        raise ValueError("prior weight must be non-negative")
    if not isinstance(signs, Mapping):
        signs = {m.sign: m for m in signs}
    sents = []
    for s in sentences:
        lab = s.signs
        for w in lab:
            if w not in signs:
                raise KeyError(f"sentence uses unknown sign {w!r}")
        sents.append((s.frames, lab))
    pairs = {(a, b) for _, lab in sents for a, b in zip(lab, lab[1:])}
    if init is not None:
        pairs |= {tuple(p) for p in init}
    pairs = sorted(pairs)
    trans = {}
    for p in pairs:
        tm = init[p] if init is not None and p in init else interpolate_transition(signs[p[0]], signs[p[1]])
        trans[p] = replicate_states(tm, n_states) if tm.n_states != n_states else tm
    prior = dict(trans)
    sign_cache: dict = {}
    history = []
    dims = layout.dims
    for it in range(max_iter + 1):
        occ = {p: np.zeros((n_states,)) for p in pairs}
        s1 = {p: [[np.zeros(d) for d in dims] for _ in range(n_states)] for p in pairs}
        s2 = {p: [[np.zeros(d) for d in dims] for _ in range(n_states)] for p in pairs}
        n_self = {p: np.zeros(n_states) for p in pairs}
        n_fwd = {p: np.zeros(n_states) for p in pairs}
        total = 0.0
        for si, (frames, lab) in enumerate(sents):
            states, ls, lf = _chain(lab, signs, trans)
            cache = sign_cache.setdefault(si, {})
            cd_cache: dict = {}
            emis = np.empty((len(frames), len(states)))
            for c, (kind, key, j) in enumerate(states):
                if kind == "sign":
                    ck = (key, j)
                    if ck not in cache:
                        cache[ck] = state_log_likelihood(signs[key].states[j], frames, layout)
                    emis[:, c] = cache[ck]
                else:
                    ck = (key, j)
                    if ck not in cd_cache:
                        cd_cache[ck] = state_log_likelihood(trans[key].states[j], frames, layout)
                    emis[:, c] = cd_cache[ck]
            ll, gamma, xs, xf = kernels.forward_backward_lr(emis, ls, lf)
            if not np.isfinite(ll):
                log.warning("sentence %d cannot be aligned to its linked HMM; skipped", si)
                continue
            total += ll
            parts = split_streams(frames, layout)
            for c, (kind, key, j) in enumerate(states):
                if kind != "cd":
                    continue
                g = gamma[:, c]
                gs = g.sum()
                occ[key][j] += gs
                n_self[key][j] += xs[c]
                n_fwd[key][j] += xf[c]
                if gs <= 0:
                    continue
                for s, x in enumerate(parts):
                    s1[key][j][s] += g @ x
                    s2[key][j][s] += g @ (x * x)
        history.append(total)
        if it > 0 and total - history[-2] <= rel_tol * abs(history[-2]):
            break
        if it == max_iter:
            break
        new = {}
        for p in pairs:
            tm = trans[p]
            if occ[p].sum() <= max(min_occupancy, 1e-10):
                new[p] = tm
                continue
            states = []
            for j in range(n_states):
                o = occ[p][j]
                if o <= 1e-10:
                    states.append(tm.states[j])
                    continue
                tau = prior_weight
                streams = []
                for s in range(N_STREAMS):
                    m1, m2 = s1[p][j][s], s2[p][j][s]
                    if tau > 0:
                        d0 = prior[p].states[j].streams[s]
                        mu0 = d0.mean
                        v0 = d0.weights @ (d0.variances + d0.means ** 2) - mu0 ** 2
                        m1 = m1 + tau * mu0
                        m2 = m2 + tau * (v0 + mu0 ** 2)
                    mu = m1 / (o + tau)
                    var = np.maximum(m2 / (o + tau) - mu * mu, var_floor)
                    streams.append(StreamDensity(np.ones(1), mu[None], var[None]))
                states.append(StateModel(tuple(streams)))
            a = tm.self_loop.copy()
            if train_transitions_probs:
                tot = n_self[p] + n_fwd[p] + prior_weight
                a0 = prior[p].self_loop
                a = np.where(tot > 1e-10, (n_self[p] + prior_weight * a0) / np.where(tot > 1e-10, tot, 1.0), a)
                a = np.minimum(a, 0.99)
            new[p] = TransitionModel(p, tuple(states), a)
        trans = new
    occupancy = {p: float(occ[p].sum()) for p in pairs}
    untrained = [p for p in pairs if occupancy[p] <= max(min_occupancy, 1e-10)]
    if untrained:
        log.info("%d transition models had no usable occupancy and keep their initial values",
                 len(untrained))
    return trans, TransitionTrainingReport(history, occupancy, untrained)


def tie_transitions(models: Mapping[tuple[str, str], TransitionModel], k: int, seed: int = 0,
                    var_floor: float = VAR_FLOOR):
    """Cluster transition models into ``k`` shared models.

    Models are compared through the concatenated stream means of all their
    states (scaled by pooled variance), exactly as sign-state tying does per
    stream.  Returns ``(shared, mapping)`` with ``mapping[pair]`` indexing
    ``shared``.
    """
    pairs = sorted(models)
    if not pairs:
        raise ValueError("no transition models to tie")
    n_states = {models[p].n_states for p in pairs}
    if len(n_states) != 1:
        raise ValueError("all transition models must have the same number of states")
    ns = n_states.pop()
    if k > len(pairs):
        warnings.warn(f"{k} transition models requested but only {len(pairs)} exist; using {len(pairs)}",
                      TyingWarning, stacklevel=2)
        k = len(pairs)
    # one pseudo-density per model: all states and streams concatenated
    flat = []
    for p in pairs:
        tm = models[p]
        mu = np.concatenate([st.streams[s].mean for st in tm.states for s in range(N_STREAMS)])
        var = np.concatenate([st.streams[s].weights @ (st.streams[s].variances + st.streams[s].means ** 2)
                              - st.streams[s].mean ** 2 for st in tm.states for s in range(N_STREAMS)])
        flat.append(StreamDensity.gaussian(mu, np.maximum(var, var_floor)))
    _, assign = cluster_densities(flat, np.ones(len(pairs)), k, seed, var_floor, what="transitions")
    shared = []
    for c in range(assign.max() + 1):
        members = [models[p] for p, a in zip(pairs, assign) if a == c]
        if len(members) == 1:
            shared.append(members[0].with_pair(("*", f"t{c}")))
            continue
        states = []
        for j in range(ns):
            streams = []
            for s in range(N_STREAMS):
                dens = [m.states[j].streams[s] for m in members]
                streams.append(merge_densities(dens, np.ones(len(dens)), var_floor))
            states.append(StateModel(tuple(streams)))
        a = np.mean([m.self_loop for m in members], axis=0)
        shared.append(TransitionModel(("*", f"t{c}"), tuple(states), a))
    mapping = {p: int(a) for p, a in zip(pairs, assign)}
    return shared, mapping
