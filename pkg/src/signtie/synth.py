"""Synthetic ground-truth vocabularies and sampled gesture data.

Signs come in families.  A family fixes one base pattern per (state,
stream), drawn with a wide spread (``family_spread``); each member copies
the base and, with probability ``variant_prob`` per (state, stream), moves
it by a random offset of scale ``separation``.  Members of a family are
therefore minimal pairs that differ in a few stream states, and every
stream holds a limited number of distinct patterns shared across signs.

Spreads are in units of the emission std-dev per component of an
18-dimensional stream; lower-dimensional streams are stretched by
``sqrt(18 / dim)`` so every stream carries the same expected squared
distance between patterns.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .epenthesis import TransitionModel, interpolate_transition
from .frames import FRAME_DIM, LAYOUT, GestureSequence
from .hmm import SignHMM, StateModel, StreamDensity
from .lm import BigramLM

_HALF_RANGE = 0.35
_REF_DIM = 18


@dataclass(frozen=True)
class SynthConfig:
    n_signs: int = 20
    n_states: int = 3
    n_mix: int = 1
    separation: float = 0.6
    family_size: int = 4
    family_spread: float = 3.0
    variant_prob: float = 0.15
    noise_std: float = 0.012
    self_loop: float = 0.85
    epenthesis_self_loop: float = 0.6
    lm_concentration: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_signs < 1:
            raise ValueError("vocabulary needs at least one sign")
        if self.n_states < 1 or self.n_mix < 1 or self.family_size < 1:
            raise ValueError("state, mixture and family counts must be positive")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.noise_std <= 0 or self.family_spread < 0:
            raise ValueError("noise must be positive and spreads non-negative")
        if not 0.0 <= self.variant_prob <= 1.0:
            raise ValueError("variant probability must lie in [0, 1]")
        if not 0 <= self.self_loop < 1 or not 0 <= self.epenthesis_self_loop < 1:
            raise ValueError("self-loop probabilities must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def sign_names(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"s{i:0{width}d}" for i in range(n)]


def _to_unit_range(z: np.ndarray, cfg: SynthConfig, dim: int) -> np.ndarray:
    scale = cfg.noise_std * np.sqrt(_REF_DIM / dim)
    return 0.5 + _HALF_RANGE * np.tanh(z * scale / _HALF_RANGE)


def _density(z: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> StreamDensity:
    dim = len(z)
    centre = _to_unit_range(z, cfg, dim)
    if cfg.n_mix == 1:
        mu = centre[None]
        w = np.ones(1)
    else:
        # components sit half a std-dev around the pattern centre
        mu = np.clip(centre + 0.5 * cfg.noise_std * rng.standard_normal((cfg.n_mix, dim)), 0.0, 1.0)
        w = rng.dirichlet(np.full(cfg.n_mix, 4.0))
    var = cfg.noise_std ** 2 * rng.uniform(0.7, 1.3, size=(cfg.n_mix, dim))
    return StreamDensity(w, mu, var)


def make_vocab(cfg: SynthConfig) -> tuple[list[SignHMM], BigramLM]:
    """Ground-truth sign models and a random bigram model, fixed by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    names = sign_names(cfg.n_signs)
    models: list[SignHMM] = []
    while len(models) < cfg.n_signs:
        base = [[cfg.family_spread * rng.standard_normal(d) for d in LAYOUT.dims]
                for _ in range(cfg.n_states)]
        for _ in range(min(cfg.family_size, cfg.n_signs - len(models))):
            states = []
            for j in range(cfg.n_states):
                streams = []
                for k, d in enumerate(LAYOUT.dims):
                    z = base[j][k]
                    if rng.random() < cfg.variant_prob:
                        z = z + cfg.separation * rng.standard_normal(d)
                    streams.append(_density(z, rng, cfg))
                states.append(StateModel(tuple(streams)))
            models.append(SignHMM(names[len(models)], tuple(states),
                                  np.full(cfg.n_states, cfg.self_loop)))
    V = cfg.n_signs
    probs = rng.dirichlet(np.full(V, cfg.lm_concentration), size=V)
    start = rng.dirichlet(np.full(V, cfg.lm_concentration))
    # keep every transition possible so no sentence is unreachable
    probs = 0.98 * probs + 0.02 / V
    start = 0.98 * start + 0.02 / V
    return models, BigramLM.from_probs(names, probs, start)


def _sample_chain(states: Sequence[StateModel], self_loop, rng: np.random.Generator) -> np.ndarray:
    frames = []
    for st, a in zip(states, self_loop):
        while True:
            frames.append(_sample_state(st, rng))
            if rng.random() >= a:
                break
    return np.array(frames)


def _sample_state(st: StateModel, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(FRAME_DIM)
    for dens, sl in zip(st.streams, LAYOUT.slices):
        c = 0 if dens.n_mix == 1 else rng.choice(dens.n_mix, p=dens.weights)
        out[sl] = dens.means[c] + np.sqrt(dens.variances[c]) * rng.standard_normal(dens.dim)
    return np.clip(out, 0.0, 1.0)


def sample_sign(hmm: SignHMM, rng: np.random.Generator) -> GestureSequence:
    """One realisation with geometric dwell in every state."""
    return GestureSequence(_sample_chain(hmm.states, hmm.self_loop, rng), hmm.sign)


def sample_transition(tm: TransitionModel, rng: np.random.Generator) -> np.ndarray:
    return _sample_chain(tm.states, tm.self_loop, rng)


def draw_sign_sequence(lm: BigramLM, length: int, rng: np.random.Generator) -> list[str]:
    V = len(lm.vocab)
    p = np.exp(lm.log_start)
    seq = [int(rng.choice(V, p=p / p.sum()))]
    for _ in range(length - 1):
        p = np.exp(lm.log_probs[seq[-1]])
        seq.append(int(rng.choice(V, p=p / p.sum())))
    return [lm.vocab[i] for i in seq]


def sample_sentence(vocab: Sequence[SignHMM], lm: BigramLM, epenthesis: bool,
                    length_range: tuple[int, int], rng: np.random.Generator,
                    epenthesis_self_loop: float = 0.6, return_alignment: bool = False):
    """Sample a labeled sentence.

    With ``epenthesis`` on, frames drawn from the interpolated transition
    model of each adjacent pair are inserted between signs.  With
    ``return_alignment`` the per-frame unit labels are returned too (sign id,
    or ``None`` for epenthesis frames).
    """
    if not vocab:
        raise ValueError("empty vocabulary")
    models = {m.sign: m for m in vocab}
    lo, hi = length_range
    n = int(rng.integers(lo, hi + 1))
    signs = draw_sign_sequence(lm, n, rng)
    chunks, align = [], []
    for i, w in enumerate(signs):
        if i > 0 and epenthesis:
            tm = interpolate_transition(models[signs[i - 1]], models[w], epenthesis_self_loop)
            ep = sample_transition(tm, rng)
            chunks.append(ep)
            align.extend([None] * len(ep))
        x = sample_sign(models[w], rng).frames
        chunks.append(x)
        align.extend([w] * len(x))
    seq = GestureSequence(np.concatenate(chunks), tuple(signs))
    return (seq, align) if return_alignment else seq


def sample_isolated_set(models: Sequence[SignHMM], reps: int, rng: np.random.Generator) -> list[GestureSequence]:
    return [sample_sign(m, rng) for m in models for _ in range(reps)]
