"""Stream state tying.

After every sign HMM is trained, the stream densities of all (sign, state)
pairs are clustered independently per stream into a small set of shared
patterns.  Scoring a frame then costs one density evaluation per pattern;
each (sign, state) score is six table lookups and five additions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .frames import LAYOUT, N_STREAMS, StreamLayout, split_streams
from .hmm import LOG_FLOOR, VAR_FLOOR, SignHMM, StreamDensity, safe_log

log = logging.getLogger(__name__)


class TyingWarning(UserWarning):
    pass


@dataclass
class OpCounter:
    """Operation counts used to check the cost model of tied scoring."""

    density_evals: int = 0
    lookups: int = 0
    additions: int = 0
    viterbi_evals: int = 0

    def reset(self) -> None:
        self.density_evals = self.lookups = self.additions = self.viterbi_evals = 0


@dataclass(frozen=True)
class DensityBank:
    """A stack of stream densities evaluated together.

    Mixtures of different sizes are padded with zero-weight components.
    """

    log_w: np.ndarray  # (K, M)
    means: np.ndarray  # (K, M, d)
    variances: np.ndarray  # (K, M, d)
    log_norm: np.ndarray  # (K, M)

    @classmethod
    def from_densities(cls, dens: Sequence[StreamDensity]) -> "DensityBank":
        M = max(d.n_mix for d in dens)
        dim = dens[0].dim
        K = len(dens)
        lw = np.full((K, M), -np.inf)
        mu = np.zeros((K, M, dim))
        var = np.ones((K, M, dim))
        for k, d in enumerate(dens):
            m = d.n_mix
            lw[k, :m] = safe_log(d.weights)
            mu[k, :m] = d.means
            var[k, :m] = d.variances
        norm = -0.5 * np.log(2.0 * np.pi * var).sum(axis=-1)
        return cls(lw, mu, var, norm)

    def __len__(self) -> int:
        return self.log_w.shape[0]

    def logpdf(self, x) -> np.ndarray:
        """``(T, K)`` (or ``(K,)`` for one vector) floored log-densities."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        diff = x2[:, None, None, :] - self.means[None]
        quad = (diff * diff / self.variances[None]).sum(axis=-1)
        comp = self.log_w[None] + self.log_norm[None] - 0.5 * quad
        out = comp[..., 0] if comp.shape[-1] == 1 else np.logaddexp.reduce(comp, axis=-1)
        out = np.maximum(out, LOG_FLOOR)
        return out[0] if single else out


@dataclass(frozen=True)
class TiedCodebook:
    """Per-stream shared pattern densities.

    ``patterns[s]`` lists the ``K_s`` patterns of stream ``s`` (stream order
    follows the frame layout: right-shape, left-shape, right-position,
    left-position, right-orientation, left-orientation).
    """

    patterns: tuple[tuple[StreamDensity, ...], ...]
    layout: StreamLayout = LAYOUT
    banks: tuple[DensityBank, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pats = tuple(tuple(p) for p in self.patterns)
        if len(pats) != N_STREAMS or any(len(p) == 0 for p in pats):
            raise ValueError("codebook needs at least one pattern in each of six streams")
        object.__setattr__(self, "patterns", pats)
        object.__setattr__(self, "banks", tuple(DensityBank.from_densities(p) for p in pats))

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.patterns)

    def to_dict(self) -> list:
        return [[p.to_dict() for p in stream] for stream in self.patterns]

    @classmethod
    def from_dict(cls, d: list, layout: StreamLayout = LAYOUT) -> "TiedCodebook":
        return cls(tuple(tuple(StreamDensity.from_dict(p) for p in stream) for stream in d), layout)


@dataclass(frozen=True)
class FrameScoreTable:
    """Log-likelihood of every pattern of every stream at one frame."""

    scores: tuple[np.ndarray, ...]

    def __getitem__(self, s: int) -> np.ndarray:
        return self.scores[s]


def frame_score_table(codebook: TiedCodebook, frame, counter: OpCounter | None = None) -> FrameScoreTable:
    parts = split_streams(frame, codebook.layout)
    scores = tuple(bank.logpdf(x) for bank, x in zip(codebook.banks, parts))
    if counter is not None:
        counter.density_evals += sum(codebook.sizes)
    return FrameScoreTable(scores)


def score_tables(codebook: TiedCodebook, frames, counter: OpCounter | None = None) -> list[np.ndarray]:
    """Per-stream ``(T, K_s)`` pattern scores for a whole sequence."""
    frames = np.asarray(frames, dtype=np.float64)
    parts = split_streams(frames, codebook.layout)
    out = [bank.logpdf(x) for bank, x in zip(codebook.banks, parts)]
    if counter is not None:
        counter.density_evals += len(frames) * sum(codebook.sizes)
    return out


class TiedModelSet:
    """Sign HMM skeletons plus the (sign, state, stream) -> pattern mapping.

    The original emission densities are kept on ``models`` (the untied
    reference); tied scoring only ever touches ``codebook`` and ``mapping``.
    """

    def __init__(self, models: Sequence[SignHMM], codebook: TiedCodebook, mapping):
        self.models = tuple(models)
        self.codebook = codebook
        self.signs = tuple(m.sign for m in self.models)
        if len(set(self.signs)) != len(self.signs):
            raise ValueError("duplicate sign ids")
        self.index = {s: i for i, s in enumerate(self.signs)}
        self.n_states = np.array([m.n_states for m in self.models], dtype=np.int64)
        S = int(self.n_states.max())
        U = len(self.models)
        mp = np.full((U, S, N_STREAMS), -1, dtype=np.int64)
        for u, m in enumerate(self.models):
            rows = np.asarray(mapping[u], dtype=np.int64).reshape(m.n_states, N_STREAMS)
            mp[u, : m.n_states] = rows
        sizes = np.array(codebook.sizes)
        valid = np.arange(S)[None, :] < self.n_states[:, None]
        if np.any(mp[valid] < 0) or np.any(mp[valid] >= sizes[None, :]):
            raise ValueError("mapping refers to a missing pattern")
        mp.flags.writeable = False
        self.mapping = mp
        self.log_self = np.zeros((U, S))
        self.log_fwd = np.full((U, S), -np.inf)
        for u, m in enumerate(self.models):
            self.log_self[u, : m.n_states] = m.log_self
            self.log_fwd[u, : m.n_states] = m.log_fwd
        self.log_self.flags.writeable = False
        self.log_fwd.flags.writeable = False

    def __len__(self) -> int:
        return len(self.models)

    def pattern_row(self, sign, state: int) -> np.ndarray:
        u = self.index[sign] if isinstance(sign, str) else int(sign)
        if not 0 <= state < self.n_states[u]:
            raise KeyError(f"sign {self.signs[u]!r} has no state {state}")
        return self.mapping[u, state]

    def emissions(self, tables: Sequence[np.ndarray], units=None,
                  counter: OpCounter | None = None) -> np.ndarray:
        """``(U, T, S)`` tied emissions by table lookup for the selected units."""
        mp = self.mapping if units is None else self.mapping[np.asarray(units, dtype=np.int64)]
        idx = np.maximum(mp, 0)
        T = tables[0].shape[0]
        out = np.zeros((T,) + idx.shape[:2])
        for s in range(N_STREAMS):
            out += tables[s][:, idx[:, :, s]]
        if counter is not None:
            n = int((mp[:, :, 0] >= 0).sum()) * T
            counter.lookups += N_STREAMS * n
            counter.additions += (N_STREAMS - 1) * n
        return np.ascontiguousarray(out.transpose(1, 0, 2))

    def shared_prefix_emissions(self, tables: Sequence[np.ndarray], units=None,
                                counter: OpCounter | None = None) -> np.ndarray:
        """Same result as :meth:`emissions`, sharing partial stream sums.

        (sign, state) pairs whose first ``k`` stream patterns agree reuse one
        partial sum, so each distinct pattern prefix costs one addition.
        """
        mp = self.mapping if units is None else self.mapping[np.asarray(units, dtype=np.int64)]
        U, S, _ = mp.shape
        valid = mp[:, :, 0] >= 0
        rows = mp[valid]  # (P, 6)
        T = tables[0].shape[0]
        uniq, inv = np.unique(rows[:, :1], axis=0, return_inverse=True)
        partial = tables[0][:, uniq[:, 0]]
        n_lookups = len(uniq)
        n_adds = 0
        for k in range(1, N_STREAMS):
            keys = np.concatenate([inv.reshape(-1, 1), rows[:, k:k + 1]], axis=1)
            uk, inv_k = np.unique(keys, axis=0, return_inverse=True)
            partial = partial[:, uk[:, 0]] + tables[k][:, uk[:, 1]]
            n_lookups += len(uk)
            n_adds += len(uk)
            inv = inv_k.reshape(-1)
        flat = partial[:, inv.reshape(-1)]  # (T, P)
        out = np.zeros((U, T, S))
        out.transpose(1, 0, 2)[:, valid] = flat
        if counter is not None:
            counter.lookups += n_lookups * T
            counter.additions += n_adds * T
        return out


def tied_state_log_likelihood(tms: TiedModelSet, table: FrameScoreTable, sign, state: int,
                              counter: OpCounter | None = None) -> float:
    """Six lookups and five additions."""
    row = tms.pattern_row(sign, state)
    total = table.scores[0][row[0]]
    for s in range(1, N_STREAMS):
        total = total + table.scores[s][row[s]]
    if counter is not None:
        counter.lookups += N_STREAMS
        counter.additions += N_STREAMS - 1
    return float(total)


# -- clustering ---------------------------------------------------------------


def _mixture_moments(d: StreamDensity) -> tuple[np.ndarray, np.ndarray]:
    mean = d.weights @ d.means
    second = d.weights @ (d.variances + d.means ** 2)
    return mean, second - mean ** 2


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        tot = d2.sum()
        nxt = int(rng.choice(n, p=d2 / tot)) if tot > 0 else int(rng.integers(n))
        centers[c] = points[nxt]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _ward_centers(points: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    labels = fcluster(linkage(points, method="ward"), k, criterion="maxclust") - 1
    wsum = np.bincount(labels, weights=weights)
    keep = wsum > 0
    centers = np.stack([np.bincount(labels, weights=weights * points[:, d]) for d in range(points.shape[1])], 1)
    return centers[keep] / wsum[keep, None]


def weighted_kmeans(points: np.ndarray, weights: np.ndarray, k: int, seed: int = 0,
                    max_iter: int = 100, init: str = "ward") -> np.ndarray:
    """Lloyd clustering from a Ward or seeded k-means++ start; labels in ``[0, k)``.

    ``points`` are assumed already scaled to the working metric.  Weights
    enter the centroid update only.  With ``k`` equal to the number of
    distinct points every point ends up in its own cluster.  The Ward start
    is deterministic; ``seed`` only matters for ``init="kmeans++"``.
    """
    n = len(points)
    if k >= n:
        return np.arange(n)
    if init == "ward":
        centers = _ward_centers(points, weights, k)
        k = len(centers)
    elif init == "kmeans++":
        centers = _kmeanspp(points, k, np.random.default_rng(seed))
    else:
        raise ValueError(f"unknown initialisation {init!r}")
    labels = np.full(n, -1)
    pn = (points ** 2).sum(axis=1)
    for _ in range(max_iter):
        dist = pn[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(axis=1)[None, :]
        new = dist.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # steal the point farthest from its centre
            far = int(dist[np.arange(n), new].argmax())
            new[far] = c
            dist[far] = -np.inf
            dist[far, c] = 0.0
        if np.array_equal(new, labels):
            break
        labels = new
        wsum = np.bincount(labels, weights=weights, minlength=k)
        for dim in range(points.shape[1]):
            centers[:, dim] = np.bincount(labels, weights=weights * points[:, dim], minlength=k) / wsum
    return labels


def merge_densities(members: Sequence[StreamDensity], occ: Sequence[float],
                    var_floor: float = VAR_FLOOR) -> StreamDensity:
    """Occupancy-weighted pooled density; components are matched by index."""
    if len(members) == 1:
        return members[0]
    occ = np.asarray(occ, dtype=np.float64)
    M = max(m.n_mix for m in members)
    dim = members[0].dim
    w = np.zeros(M)
    mu = np.zeros((M, dim))
    var = np.zeros((M, dim))
    for c in range(M):
        cw = np.array([o * (m.weights[c] if c < m.n_mix else 0.0) for m, o in zip(members, occ)])
        if cw.sum() <= 0:
            cw = occ.copy()
        comps = [(m.means[min(c, m.n_mix - 1)], m.variances[min(c, m.n_mix - 1)]) for m in members]
        cm = sum(wi * cmu for wi, (cmu, _) in zip(cw, comps)) / cw.sum()
        cv = sum(wi * (cvar + (cmu - cm) ** 2) for wi, (cmu, cvar) in zip(cw, comps)) / cw.sum()
        w[c] = cw.sum()
        mu[c] = cm
        var[c] = np.maximum(cv, var_floor)
    return StreamDensity(w / w.sum(), mu, var)


def cluster_densities(dens: Sequence[StreamDensity], occ: Sequence[float], k: int,
                      seed: int = 0, var_floor: float = VAR_FLOOR,
                      what: str = "stream") -> tuple[list[StreamDensity], np.ndarray]:
    """Cluster densities into at most ``k`` patterns.

    Returns ``(patterns, assignment)`` where ``assignment[i]`` indexes the
    pattern of ``dens[i]``.  Identical densities always share a pattern.
    """
    if k < 1:
        raise ValueError("pattern count must be at least 1")
    keys = {}
    distinct_of = np.empty(len(dens), dtype=np.int64)
    reps: list[StreamDensity] = []
    docc: list[float] = []
    for i, d in enumerate(dens):
        key = (d.weights.tobytes(), d.means.tobytes(), d.variances.tobytes())
        if key not in keys:
            keys[key] = len(reps)
            reps.append(d)
            docc.append(0.0)
        distinct_of[i] = keys[key]
        docc[distinct_of[i]] += float(occ[i])
    n = len(reps)
    if k > n:
        warnings.warn(f"{what}: {k} patterns requested but only {n} distinct densities; using {n}",
                      TyingWarning, stacklevel=3)
        k = n
    docc_a = np.maximum(np.array(docc), 1e-12)
    moments = [_mixture_moments(d) for d in reps]
    means = np.array([m for m, _ in moments])
    pooled = (docc_a[:, None] * np.array([v for _, v in moments])).sum(0) / docc_a.sum()
    scaled = means / np.sqrt(np.maximum(pooled, 1e-300))
    labels = weighted_kmeans(scaled, docc_a, k, seed)
    used = np.unique(labels)
    remap = np.full(labels.max() + 1, -1)
    remap[used] = np.arange(len(used))
    labels = remap[labels]
    patterns = []
    for c in range(len(used)):
        idx = np.flatnonzero(labels == c)
        patterns.append(merge_densities([reps[i] for i in idx], docc_a[idx], var_floor))
    return patterns, labels[distinct_of]


def cluster_stream_states(models: Sequence[SignHMM], K: Sequence[int] | int, seed: int = 0,
                          var_floor: float = VAR_FLOOR, layout: StreamLayout = LAYOUT) -> TiedModelSet:
    """Tie the stream densities of all trained models into ``K[s]`` patterns per stream."""
    if isinstance(K, int):
        K = (K,) * N_STREAMS
    K = tuple(int(k) for k in K)
    if len(K) != N_STREAMS:
        raise ValueError("need six pattern counts")
    models = list(models)
    if not models:
        raise ValueError("no models to tie")
    for m in models:
        for st in m.states:
            st.check_layout(layout)
    owners = [(u, j) for u, m in enumerate(models) for j in range(m.n_states)]
    mapping = [np.zeros((m.n_states, N_STREAMS), dtype=np.int64) for m in models]
    patterns = []
    for s in range(N_STREAMS):
        dens = [models[u].states[j].streams[s] for u, j in owners]
        occ = [models[u].occupancy[j] for u, j in owners]
        pats, assign = cluster_densities(dens, occ, K[s], seed + s, var_floor,
                                         what=f"stream {layout.names[s]}")
        patterns.append(tuple(pats))
        for (u, j), a in zip(owners, assign):
            mapping[u][j, s] = a
    return TiedModelSet(models, TiedCodebook(tuple(patterns), layout), mapping)


def untied_model_set(models: Sequence[SignHMM], layout: StreamLayout = LAYOUT) -> TiedModelSet:
    """Lossless model set: one pattern per (sign, state, stream), no clustering."""
    models = list(models)
    mapping = []
    patterns = [[] for _ in range(N_STREAMS)]
    for m in models:
        rows = np.zeros((m.n_states, N_STREAMS), dtype=np.int64)
        for j, st in enumerate(m.states):
            for s, d in enumerate(st.streams):
                rows[j, s] = len(patterns[s])
                patterns[s].append(d)
        mapping.append(rows)
    return TiedModelSet(models, TiedCodebook(tuple(tuple(p) for p in patterns), layout), mapping)


def max_pattern_counts(models: Sequence[SignHMM]) -> tuple[int, ...]:
    """Number of distinct densities in each stream (the lossless pattern counts)."""
    out = []
    for s in range(N_STREAMS):
        keys = {(st.streams[s].weights.tobytes(), st.streams[s].means.tobytes(),
                 st.streams[s].variances.tobytes()) for m in models for st in m.states}
        out.append(len(keys))
    return tuple(out)
