"""Invariants checked over at least a hundred random cases each."""

import json
import math
import warnings

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from signtie.bundle import ModelBundle
from signtie.decoder import BeamConfig, DecodeError, DecodeNetwork, decode
from signtie.hmm import fit_hmm
from signtie.isolated import GateConfig, build_subsets, codeword_posteriors, recognize_isolated
from signtie.kernels import forward_backward_lr
from signtie.synth import SynthConfig, make_vocab, sample_sentence, sample_sign
from signtie.tying import cluster_stream_states
from signtie.frames import split_streams

from conftest import random_bundle, random_hmm

CASES = settings(max_examples=100)
seeds = st.integers(0, 2**32 - 1)


@CASES
@given(seeds, st.integers(1, 3), st.integers(1, 2))
def test_em_objective_never_decreases(seed, n_states, n_mix):
    rng = np.random.default_rng(seed)
    gen = random_hmm(rng, "e", n_states=n_states)
    seqs = [sample_sign(gen, rng).frames for _ in range(3)]
    _, hist = fit_hmm(seqs, n_states, n_mix, max_iter=6, segmental_iters=2, seed=seed % 1000)
    assert all(b >= a - 1e-6 * max(1.0, abs(a)) for a, b in zip(hist, hist[1:]))


@CASES
@given(seeds)
def test_posteriors_normalized(seed):
    rng = np.random.default_rng(seed)
    models = [random_hmm(rng, f"p{i}") for i in range(int(rng.integers(1, 8)))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tms = cluster_stream_states(models, int(rng.integers(1, 6)), seed=seed % 97)
    cb = build_subsets(tms)
    x = rng.random(48)
    for k, part in enumerate(split_streams(x)):
        p = codeword_posteriors(part, k, cb, tms.codebook)
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12
    T, N = int(rng.integers(N := int(rng.integers(1, 5)), 20)), N
    a = rng.uniform(0.05, 0.95, N)
    _, gamma, _, _ = forward_backward_lr(rng.normal(-5, 3, (T, N)), np.log(a), np.log1p(-a))
    assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-9)


@CASES
@given(seeds)
def test_start_subsets_partition_the_vocabulary(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(1, 12))
    models = [random_hmm(rng, f"q{i}", n_states=int(rng.integers(1, 4))) for i in range(V)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tms = cluster_stream_states(models, int(rng.integers(1, 8)), seed=seed % 89)
    cb = build_subsets(tms)
    for k in range(6):
        members = np.concatenate(cb.subsets[k])
        assert sorted(members.tolist()) == list(range(V))  # disjoint and covering
        for cw, sub in zip(cb.codewords[k], cb.subsets[k]):
            assert np.all(tms.mapping[sub, 0, k] == cw)


_NETS = {}


@CASES
@given(seeds, st.sampled_from(["state_beam", "sign_beam", "unit_threshold", "lookahead_beam"]))
def test_best_score_non_decreasing_in_beam_width(seed, which):
    key = seed % 5
    if key not in _NETS:
        gt, lm = make_vocab(SynthConfig(n_signs=5, seed=key))
        _NETS[key] = (gt, lm, DecodeNetwork(cluster_stream_states(gt, 6, seed=key), lm, "interpolate"))
    gt, lm, net = _NETS[key]
    s = sample_sentence(gt, lm, True, (2, 4), np.random.default_rng(seed))
    prev = -math.inf
    for width in (2.0, 5.0, 10.0, math.inf):
        try:
            score = decode(s, net, BeamConfig(**{which: width})).score
        except DecodeError:
            score = -math.inf
        assert score >= prev - 1e-9
        prev = score


@CASES
@given(seeds, st.booleans(), st.booleans())
def test_save_load_bit_exact(tmp_path_factory, seed, tied, transitions):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = random_bundle(np.random.default_rng(seed), tied, transitions)
    path = tmp_path_factory.mktemp("rt") / "b.json"
    b.save(path)
    back = ModelBundle.load(path)
    assert json.dumps(back.to_dict()) == json.dumps(b.to_dict())
    back.save(path)
    assert ModelBundle.load(path).to_dict() == back.to_dict()
    for m1, m2 in zip(b.models, back.models):
        assert m1.self_loop.tobytes() == m2.self_loop.tobytes()
        for s1, s2 in zip(m1.states, m2.states):
            for d1, d2 in zip(s1.streams, s2.streams):
                assert d1.weights.tobytes() == d2.weights.tobytes()
                assert d1.means.tobytes() == d2.means.tobytes()
                assert d1.variances.tobytes() == d2.variances.tobytes()


def _run(seed):
    cfg = SynthConfig(n_signs=3, seed=seed)
    gt, lm = make_vocab(cfg)
    rng = np.random.default_rng(seed)
    models = [fit_hmm([sample_sign(m, rng) for _ in range(3)], 3, 1, sign=m.sign, seed=seed,
                      max_iter=3, segmental_iters=1)[0] for m in gt]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tms = cluster_stream_states(models, 4, seed=seed)
    test = sample_sign(gt[0], rng)
    iso = recognize_isolated(test, tms, build_subsets(tms), GateConfig(tau=1e-3), n_best=3)
    sent = sample_sentence(gt, lm, True, (2, 3), rng)
    r = decode(sent, DecodeNetwork(tms, lm, "interpolate"))
    return json.dumps([m.to_dict() for m in models]), iso, r.signs, r.score


@CASES
@given(st.integers(0, 10_000))
def test_seeded_pipeline_is_deterministic(seed):
    assert _run(seed) == _run(seed)
