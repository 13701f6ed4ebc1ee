"""Untied multi-stream HMMs: densities, exact scoring, Viterbi and Baum-Welch.

Each state's emission density factorizes over the six streams, so a state
log-likelihood is the sum of six stream log-likelihoods.  Every stream is a
diagonal-covariance Gaussian mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .frames import LAYOUT, N_STREAMS, GestureSequence, StreamLayout, split_streams

log = logging.getLogger(__name__)

LOG_FLOOR = -1e10
VAR_FLOOR = 1e-4


class InfeasibleSequence(ValueError):
    """Sequence shorter than the number of states of a no-skip model."""


class TrainingError(ValueError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


def safe_log(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(p > 0, np.log(np.maximum(p, 1e-300)), -np.inf)


@dataclass(frozen=True)
class StreamDensity:
    """Diagonal Gaussian mixture over one stream.

    ``weights`` has shape ``(M,)``; ``means`` and ``variances`` ``(M, d)``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights).reshape(-1)
        mu = _frozen(np.atleast_2d(self.means))
        var = _frozen(np.atleast_2d(self.variances))
        if mu.shape != var.shape or mu.shape[0] != len(w):
            raise ValueError(f"inconsistent mixture shapes {w.shape} {mu.shape} {var.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @classmethod
    def gaussian(cls, mean, var) -> "StreamDensity":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(np.ones(1), mean[None, :], np.broadcast_to(var, mean.shape)[None, :])

    @property
    def n_mix(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def mean(self) -> np.ndarray:
        """Mixture mean (weighted mean of the component means)."""
        return self.weights @ self.means

    def component_logpdf(self, x) -> np.ndarray:
        """``(..., M)`` log of weight times component density."""
        x = np.asarray(x, dtype=np.float64)[..., None, :]
        quad = ((x - self.means) ** 2 / self.variances).sum(axis=-1)
        norm = np.log(2.0 * np.pi * self.variances).sum(axis=-1)
        return safe_log(self.weights) - 0.5 * (norm + quad)

    def logpdf(self, x) -> np.ndarray | float:
        comp = self.component_logpdf(x)
        out = np.logaddexp.reduce(comp, axis=-1)
        out = np.maximum(out, LOG_FLOOR)
        return out if np.ndim(out) else float(out)

    def same_as(self, other: "StreamDensity") -> bool:
        return (np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.variances, other.variances))

    def to_dict(self) -> dict:
        return {"w": self.weights.tolist(), "mu": self.means.tolist(), "var": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StreamDensity":
        return cls(np.array(d["w"]), np.array(d["mu"]), np.array(d["var"]))


@dataclass(frozen=True)
class StateModel:
    streams: tuple[StreamDensity, ...]

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        if len(self.streams) != N_STREAMS:
            raise ValueError(f"state needs {N_STREAMS} stream densities")

    def check_layout(self, layout: StreamLayout = LAYOUT) -> None:
        if tuple(s.dim for s in self.streams) != layout.dims:
            raise ValueError("stream dimensions do not match layout")

    def to_dict(self) -> list:
        return [s.to_dict() for s in self.streams]

    @classmethod
    def from_dict(cls, d: list) -> "StateModel":
        return cls(tuple(StreamDensity.from_dict(x) for x in d))


def state_log_likelihood(state: StateModel, frame, layout: StreamLayout = LAYOUT):
    """Sum of the six stream log-densities for one frame or a ``(T, 48)`` block."""
    parts = split_streams(frame, layout)
    total = 0.0
    for dens, x in zip(state.streams, parts):
        total = total + dens.logpdf(x)
    return total


@dataclass(frozen=True)
class SignHMM:
    """Left-to-right no-skip HMM for one sign.

    ``self_loop[i]`` is the self-transition probability of state ``i``; the
    forward probability is ``1 - self_loop[i]`` (for the final state this is
    the probability of leaving the sign).  ``occupancy`` holds the expected
    frame count per state from training and weights the tying step.
    """

    sign: str
    states: tuple[StateModel, ...]
    self_loop: np.ndarray
    occupancy: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        a = _frozen(self.self_loop).reshape(-1)
        if len(a) != len(self.states) or len(a) == 0:
            raise ValueError("need one self-loop probability per state")
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("self-loop probabilities must lie in [0, 1]")
        object.__setattr__(self, "self_loop", a)
        occ = np.ones(len(a)) if self.occupancy is None else self.occupancy
        object.__setattr__(self, "occupancy", _frozen(occ).reshape(-1))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def log_self(self) -> np.ndarray:
        return safe_log(self.self_loop)

    @property
    def log_fwd(self) -> np.ndarray:
        return safe_log(1.0 - self.self_loop)

    @property
    def log_exit(self) -> float:
        return float(self.log_fwd[-1])

    def emissions(self, frames, layout: StreamLayout = LAYOUT) -> np.ndarray:
        """``(T, n_states)`` untied state log-likelihoods."""
        frames = np.asarray(frames, dtype=np.float64)
        return np.stack([state_log_likelihood(s, frames, layout) for s in self.states], axis=1)

    def to_dict(self) -> dict:
        return {"sign": self.sign, "self_loop": self.self_loop.tolist(),
                "occupancy": self.occupancy.tolist(),
                "states": [s.to_dict() for s in self.states]}

    @classmethod
    def from_dict(cls, d: dict) -> "SignHMM":
        return cls(d["sign"], tuple(StateModel.from_dict(s) for s in d["states"]),
                   np.array(d["self_loop"]), np.array(d["occupancy"]))


def _frames_of(seq) -> np.ndarray:
    return seq.frames if isinstance(seq, GestureSequence) else np.asarray(seq, dtype=np.float64)


def viterbi_from_emissions(emis, log_self, log_fwd):
    """Viterbi over a precomputed ``(T, N)`` emission matrix."""
    T, N = emis.shape
    if T < N:
        raise InfeasibleSequence(f"{T} frames cannot traverse {N} no-skip states")
    return kernels.viterbi_lr(emis, log_self, log_fwd)


def viterbi_score(hmm: SignHMM, seq) -> tuple[float, np.ndarray]:
    """Best-path log score and state path of ``seq`` under ``hmm``.

    The path starts in the first state and ends in the last state at the
    final frame; the final exit transition is not included.
    """
    frames = _frames_of(seq)
    if len(frames) < hmm.n_states:
        raise InfeasibleSequence(f"{len(frames)} frames cannot traverse {hmm.n_states} no-skip states")
    return viterbi_from_emissions(hmm.emissions(frames), hmm.log_self, hmm.log_fwd)


def forward_log_likelihood(hmm: SignHMM, seq, include_exit: bool = False) -> float:
    """Total (all-path) log-likelihood; ``-inf`` when the sequence is too short."""
    frames = _frames_of(seq)
    ll = kernels.forward_backward_lr(hmm.emissions(frames), hmm.log_self, hmm.log_fwd)[0]
    if include_exit and np.isfinite(ll):
        ll += hmm.log_exit
    return float(ll)


# -- training -----------------------------------------------------------------


@dataclass
class _Acc:
    """Per-state, per-stream sufficient statistics."""

    occ: np.ndarray  # (N, 6, M)
    s1: list  # per stream (N, M, d)
    s2: list
    n_self: np.ndarray
    n_fwd: np.ndarray

    @classmethod
    def zeros(cls, n, m, dims):
        return cls(np.zeros((n, N_STREAMS, m)),
                   [np.zeros((n, m, d)) for d in dims],
                   [np.zeros((n, m, d)) for d in dims],
                   np.zeros(n), np.zeros(n))


def _component_posteriors(hmm: SignHMM, frames, layout):
    """Per stream, per state: ``(T, M)`` component log-probs; plus state emissions."""
    parts = split_streams(frames, layout)
    comp = []
    emis = np.zeros((len(frames), hmm.n_states))
    for j, st in enumerate(hmm.states):
        row = []
        for s, (dens, x) in enumerate(zip(st.streams, parts)):
            c = dens.component_logpdf(x)
            lse = np.logaddexp.reduce(c, axis=-1)
            emis[:, j] += np.maximum(lse, LOG_FLOOR)
            row.append(np.exp(c - lse[:, None]) if dens.n_mix > 1 else np.ones((len(x), 1)))
        comp.append(row)
    return comp, emis


def _accumulate(hmm: SignHMM, seqs, layout, acc: _Acc) -> float:
    total = 0.0
    for frames in seqs:
        comp, emis = _component_posteriors(hmm, frames, layout)
        ll, gamma, n_self, n_fwd = kernels.forward_backward_lr(emis, hmm.log_self, hmm.log_fwd)
        if not np.isfinite(ll):
            continue
        total += ll + hmm.log_exit
        parts = split_streams(frames, layout)
        for j in range(hmm.n_states):
            g = gamma[:, j]
            for s, x in enumerate(parts):
                gm = g[:, None] * comp[j][s]  # (T, M)
                acc.occ[j, s] += gm.sum(axis=0)
                acc.s1[s][j] += gm.T @ x
                acc.s2[s][j] += gm.T @ (x * x)
        acc.n_self += n_self
        acc.n_fwd += n_fwd
        acc.n_fwd[-1] += 1.0  # sequence end counts as leaving the final state
    return total


def _reestimate(hmm: SignHMM, acc: _Acc, var_floor: float) -> SignHMM:
    states = []
    for j, st in enumerate(hmm.states):
        streams = []
        for s, old in enumerate(st.streams):
            occ = acc.occ[j, s]
            if occ.sum() <= 1e-10:
                streams.append(old)
                continue
            w = occ / occ.sum()
            safe = np.where(occ > 1e-10, occ, 1.0)[:, None]
            mu = np.where(occ[:, None] > 1e-10, acc.s1[s][j] / safe, old.means)
            var = np.where(occ[:, None] > 1e-10, acc.s2[s][j] / safe - mu * mu, old.variances)
            streams.append(StreamDensity(w, mu, np.maximum(var, var_floor)))
        states.append(StateModel(tuple(streams)))
    tot = acc.n_self + acc.n_fwd
    a = np.where(tot > 0, acc.n_self / np.where(tot > 0, tot, 1.0), hmm.self_loop)
    occupancy = acc.occ[:, 0, :].sum(axis=1)
    return SignHMM(hmm.sign, tuple(states), a, occupancy)


def _kmeans_init(x: np.ndarray, m: int, rng: np.random.Generator, iters: int = 10):
    """Plain k-means for splitting one state's frames into mixture components."""
    m = min(m, len(x))
    centers = x[rng.choice(len(x), size=m, replace=False)]
    for _ in range(iters):
        lab = ((x[:, None, :] - centers[None]) ** 2).sum(-1).argmin(1)
        for k in range(m):
            if np.any(lab == k):
                centers[k] = x[lab == k].mean(0)
    return lab, m


def _estimate_from_segments(sign: str, seqs: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                            n_states: int, n_mix: int, var_floor: float, rng: np.random.Generator,
                            layout: StreamLayout) -> SignHMM:
    """Hard-assignment estimate: ``labels[i][t]`` is the state of frame ``t`` of ``seqs[i]``."""
    states = []
    occupancy = []
    for j in range(n_states):
        x = np.concatenate([f[lab == j] for f, lab in zip(seqs, labels)])
        occupancy.append(len(x))
        streams = []
        for sl in layout.slices:
            xs = x[:, sl]
            if n_mix == 1 or len(xs) < 2:
                streams.append(StreamDensity.gaussian(xs.mean(0), np.maximum(xs.var(0), var_floor)))
                continue
            lab, m = _kmeans_init(xs, n_mix, rng)
            w, mu, var = [], [], []
            for k in range(n_mix):
                sel = xs[lab == k] if k < m and np.any(lab == k) else xs
                w.append(max(len(sel), 1))
                mu.append(sel.mean(0))
                var.append(np.maximum(sel.var(0), var_floor))
            w = np.array(w, dtype=float)
            streams.append(StreamDensity(w / w.sum(), np.array(mu), np.array(var)))
        states.append(StateModel(tuple(streams)))
    dwell = np.array(occupancy, dtype=float) / len(seqs)
    self_loop = np.clip(1.0 - 1.0 / np.maximum(dwell, 1.0), 0.1, 0.95)
    return SignHMM(sign, tuple(states), self_loop, np.array(occupancy, dtype=float))


def _uniform_labels(T: int, n_states: int) -> np.ndarray:
    bounds = np.linspace(0, T, n_states + 1).round().astype(int)
    return np.repeat(np.arange(n_states), np.diff(bounds))


def _min_distortion_labels(frames: np.ndarray, n_states: int) -> np.ndarray:
    """Contiguous split into ``n_states`` blocks minimizing the within-block squared error."""
    T = len(frames)
    c1 = np.vstack([np.zeros(frames.shape[1]), np.cumsum(frames, axis=0)])
    c2 = np.concatenate([[0.0], np.cumsum((frames ** 2).sum(axis=1))])

    def sse(a, b):
        n = b - a
        return c2[b] - c2[a] - ((c1[b] - c1[a]) ** 2).sum() / n

    cost = np.full((n_states + 1, T + 1), np.inf)
    back = np.zeros((n_states + 1, T + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for j in range(1, n_states + 1):
        for b in range(j, T - (n_states - j) + 1):
            for a in range(j - 1, b):
                c = cost[j - 1, a] + sse(a, b)
                if c < cost[j, b]:
                    cost[j, b] = c
                    back[j, b] = a
    bounds = [T]
    for j in range(n_states, 0, -1):
        bounds.append(back[j, bounds[-1]])
    return np.repeat(np.arange(n_states), np.diff(bounds[::-1]))


def uniform_init(sign: str, seqs: Sequence[np.ndarray], n_states: int, n_mix: int,
                 var_floor: float = VAR_FLOOR, seed: int = 0,
                 layout: StreamLayout = LAYOUT) -> SignHMM:
    """Initial model from a uniform segmentation of every sequence."""
    labels = [_uniform_labels(len(f), n_states) for f in seqs]
    return _estimate_from_segments(sign, seqs, labels, n_states, n_mix, var_floor,
                                   np.random.default_rng(seed), layout)


def _refine(hmm: SignHMM, seqs, labels, n_states, n_mix, var_floor, rng, max_iter, layout):
    for _ in range(max_iter):
        new = []
        for f, old in zip(seqs, labels):
            score, path = kernels.viterbi_lr(hmm.emissions(f, layout), hmm.log_self, hmm.log_fwd)
            new.append(path if np.isfinite(score) else old)
        if all(np.array_equal(a, b) for a, b in zip(new, labels)):
            break
        labels = new
        hmm = _estimate_from_segments(hmm.sign, seqs, labels, n_states, n_mix, var_floor, rng, layout)
    return hmm


def _total_loglik(hmm: SignHMM, seqs, layout) -> float:
    return sum(kernels.forward_backward_lr(hmm.emissions(f, layout), hmm.log_self, hmm.log_fwd)[0]
               for f in seqs)


def segmental_init(sign: str, seqs: Sequence[np.ndarray], n_states: int, n_mix: int,
                   var_floor: float = VAR_FLOOR, seed: int = 0, max_iter: int = 10,
                   layout: StreamLayout = LAYOUT) -> SignHMM:
    """Starting model for EM.

    Two segmentations are refined by Viterbi re-alignment: the uniform
    split and the per-sequence minimum-distortion split.  The uniform one
    alone can lock two distinct stretches of a sign into one state; the
    start with the higher likelihood is kept (uniform on ties).
    """
    best, best_ll = None, -np.inf
    starts = ([_uniform_labels(len(f), n_states) for f in seqs],
              [_min_distortion_labels(f, n_states) for f in seqs])
    for labels in starts:
        rng = np.random.default_rng(seed)
        hmm = _estimate_from_segments(sign, seqs, labels, n_states, n_mix, var_floor, rng, layout)
        hmm = _refine(hmm, seqs, labels, n_states, n_mix, var_floor, rng, max_iter, layout)
        ll = _total_loglik(hmm, seqs, layout)
        if best is None or ll > best_ll:
            best, best_ll = hmm, ll
    return best


def fit_hmm(seqs, n_states: int = 3, n_mix: int = 1, sign: str | None = None,
            max_iter: int = 20, rel_tol: float = 1e-4, var_floor: float = VAR_FLOOR,
            seed: int = 0, segmental_iters: int = 10,
            layout: StreamLayout = LAYOUT) -> tuple[SignHMM, list[float]]:
    """Baum-Welch training; returns the model and the per-iteration objective.

    The objective is the training-set log-likelihood including the final
    exit transition of each sequence (the quantity EM maximizes).  Sequences
    shorter than ``n_states`` are skipped.  The starting point is a uniform
    segmentation, refined by up to ``segmental_iters`` rounds of Viterbi
    re-segmentation (0 keeps the plain uniform start).
    """
    all_frames = [_frames_of(s) for s in seqs]
    if not all_frames:
        raise TrainingError("empty training set")
    frames = [f for f in all_frames if len(f) >= n_states]
    if not frames:
        raise TrainingError(f"no training sequence has at least {n_states} frames")
    if len(frames) < len(all_frames):
        log.warning("skipping %d sequences shorter than %d frames",
                    len(all_frames) - len(frames), n_states)
    if sign is None:
        first = seqs[0]
        sign = first.label if isinstance(first, GestureSequence) and isinstance(first.label, str) else "sign"
    hmm = segmental_init(sign, frames, n_states, n_mix, var_floor, seed, segmental_iters, layout)
    dims = layout.dims
    history: list[float] = []
    for it in range(max_iter):
        acc = _Acc.zeros(n_states, n_mix, dims)
        ll = _accumulate(hmm, frames, layout, acc)
        history.append(ll)
        if it > 0 and ll - history[-2] <= rel_tol * abs(history[-2]):
            break
        hmm = _reestimate(hmm, acc, var_floor)
    else:
        acc = _Acc.zeros(n_states, n_mix, dims)
        history.append(_accumulate(hmm, frames, layout, acc))
    return hmm, history


def baum_welch_train(seqs, n_states: int = 3, n_mix: int = 1, **kw) -> SignHMM:
    return fit_hmm(seqs, n_states, n_mix, **kw)[0]


def select_state_count(seqs, n_mix: int = 1, tie_tol: float = 1e-3, **kw) -> int:
    """Choose 3 or 5 states by held-out per-frame log-likelihood.

    The last sequence is held out; the 5-state model wins only if its
    per-frame score beats the 3-state one by more than ``tie_tol`` relative.
    """
    if len(seqs) < 2:
        return 3
    train, held = list(seqs[:-1]), _frames_of(seqs[-1])
    scores = {}
    for n in (3, 5):
        try:
            hmm = baum_welch_train(train, n, n_mix, **kw)
        except TrainingError:
            scores[n] = -np.inf
            continue
        scores[n] = forward_log_likelihood(hmm, held) / len(held)
    if not np.isfinite(scores[5]):
        return 3
    if not np.isfinite(scores[3]):
        return 5
    return 5 if scores[5] - scores[3] > tie_tol * abs(scores[3]) else 3
