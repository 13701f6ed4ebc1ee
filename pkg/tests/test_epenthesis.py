import hashlib
import json

import numpy as np
import pytest

from signtie.epenthesis import (TransitionModel, average_states, interpolate_transition, replicate_states,
                                tie_transitions, train_transitions)
from signtie.frames import LAYOUT, GestureSequence
from signtie.hmm import SignHMM, StateModel, StreamDensity
from signtie.synth import SynthConfig, make_vocab, sample_sentence, sample_sign
from signtie.tying import TyingWarning

from conftest import random_hmm, random_state


def _state(mean, var):
    return StateModel(tuple(StreamDensity.gaussian(np.full(d, mean), np.full(d, var)) for d in LAYOUT.dims))


def test_identical_boundary_states():
    rng = np.random.default_rng(0)
    st = random_state(rng)
    u = SignHMM("u", (random_state(rng), st), np.array([0.5, 0.7]))
    v = SignHMM("v", (st, random_state(rng)), np.array([0.7, 0.5]))
    tm = interpolate_transition(u, v)
    assert tm.n_states == 1
    for a, b in zip(tm.states[0].streams, st.streams):
        assert np.array_equal(a.means, b.means) and np.array_equal(a.variances, b.variances)
    assert tm.self_loop[0] == pytest.approx(0.7)


def test_arithmetic_mean_and_variance():
    u = SignHMM("u", (_state(0.0, 1.0),), np.array([0.5]))
    v = SignHMM("v", (_state(2.0, 3.0),), np.array([0.5]))
    d = interpolate_transition(u, v).states[0].streams[2]
    assert np.all(d.means == 1.0) and np.all(d.variances == 2.0)


def test_random_componentwise_average():
    rng = np.random.default_rng(1)
    for _ in range(10):
        u, v = random_hmm(rng, "u"), random_hmm(rng, "v")
        tm = interpolate_transition(u, v)
        for s in range(6):
            expect = 0.5 * (u.states[-1].streams[s].means + v.states[0].streams[s].means)
            assert np.allclose(tm.states[0].streams[s].means, expect, atol=1e-12, rtol=0)


def test_swap_symmetry():
    rng = np.random.default_rng(2)
    u, v = random_hmm(rng, "u"), random_hmm(rng, "v")
    ur = SignHMM("u", u.states[::-1], u.self_loop[::-1])
    vr = SignHMM("v", v.states[::-1], v.self_loop[::-1])
    a, b = interpolate_transition(u, v), interpolate_transition(vr, ur)
    assert json.dumps(a.states[0].to_dict()) == json.dumps(b.states[0].to_dict())
    assert np.array_equal(a.self_loop, b.self_loop)
    x, y = u.states[-1], v.states[0]
    assert average_states(x, y).to_dict() == average_states(y, x).to_dict()


def test_mixture_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        interpolate_transition(random_hmm(rng, "u", n_mix=1), random_hmm(rng, "v", n_mix=2))


def test_entry_probability_fixed():
    with pytest.raises(ValueError):
        TransitionModel(("a", "b"), (_state(0.5, 0.01),), np.array([0.5]), entry_log_prob=-0.1)
    with pytest.raises(ValueError):
        TransitionModel(("a", "b"), (_state(0.5, 0.01),) * 2, np.array([0.5, 0.5]))


def test_replicate_keeps_dwell():
    tm = TransitionModel(("a", "b"), (_state(0.5, 0.01),), np.array([0.8]))
    r = replicate_states(tm, 3)
    assert r.n_states == 3
    assert np.sum(1 / (1 - r.self_loop)) == pytest.approx(1 / (1 - 0.8))


@pytest.fixture(scope="module")
def sentence_world():
    cfg = SynthConfig(n_signs=4, seed=8)
    gt, lm = make_vocab(cfg)
    rng = np.random.default_rng(9)
    train = [sample_sentence(gt, lm, True, (2, 5), rng, 0.6) for _ in range(150)]
    held = [sample_sentence(gt, lm, True, (2, 5), rng, 0.6) for _ in range(40)]
    return gt, train, held


def _hash(models):
    return hashlib.sha256(json.dumps([m.to_dict() for m in models]).encode()).hexdigest()


def _per_frame(sents, signs, trans):
    _, rep = train_transitions(sents, signs, init=trans, max_iter=0, n_states=next(iter(trans.values())).n_states)
    return rep.history[0] / sum(len(s) for s in sents)


def test_generator_oracle_and_frozen_signs(sentence_world):
    gt, train, held = sentence_world
    before = _hash(gt)
    trained, rep = train_transitions(train, gt, n_states=1)
    assert _hash(gt) == before
    assert all(b >= a - 1e-6 for a, b in zip(rep.history, rep.history[1:]))
    gen = {p: interpolate_transition(gt[int(p[0][1:])], gt[int(p[1][1:])], 0.6) for p in trained}
    fit, ref = _per_frame(held, gt, trained), _per_frame(held, gt, gen)
    assert abs(fit - ref) <= 0.05 * abs(ref)


def test_three_state_training_monotone(sentence_world):
    gt, train, _ = sentence_world
    trained, rep = train_transitions(train[:60], gt, n_states=3)
    assert all(m.n_states == 3 for m in trained.values())
    assert all(b >= a - 1e-6 for a, b in zip(rep.history, rep.history[1:]))


def test_no_occupancy_keeps_initialization(sentence_world):
    gt, _, _ = sentence_world
    rng = np.random.default_rng(4)
    lone = [GestureSequence(sample_sign(gt[0], rng).frames, (gt[0].sign,)) for _ in range(5)]
    init = {("s0", "s1"): interpolate_transition(gt[0], gt[1])}
    trained, rep = train_transitions(lone, gt, init=init)
    assert rep.untrained == [("s0", "s1")]
    assert trained[("s0", "s1")] is init[("s0", "s1")]


def test_unknown_sign_rejected(sentence_world):
    gt, _, _ = sentence_world
    bad = GestureSequence(np.full((10, 48), 0.5), ("s0", "zz"))
    with pytest.raises(KeyError):
        train_transitions([bad], gt)


def test_prior_weight_pulls_towards_initialization(sentence_world):
    gt, train, _ = sentence_world
    init = {p: interpolate_transition(gt[int(p[0][1:])], gt[int(p[1][1:])])
            for p in {(a, b) for s in train[:20] for a, b in zip(s.signs, s.signs[1:])}}
    ml, _ = train_transitions(train[:20], gt, init=init)
    strong, _ = train_transitions(train[:20], gt, init=init, prior_weight=1e9)
    for p in init:
        dev = np.abs(strong[p].states[0].streams[0].mean - init[p].states[0].streams[0].mean).max()
        assert dev < 1e-6
    assert any(np.abs(ml[p].states[0].streams[0].mean - init[p].states[0].streams[0].mean).max() > 1e-3
               for p in init)
    with pytest.raises(ValueError):
        train_transitions(train[:5], gt, prior_weight=-1.0)


def _pair_models(rng, n, centre):
    out = {}
    for i in range(n):
        st = StateModel(tuple(StreamDensity.gaussian(np.clip(centre + 0.001 * rng.standard_normal(d), 0, 1),
                                                     np.full(d, 1e-4)) for d in LAYOUT.dims))
        out[(f"a{centre}", f"b{i}")] = TransitionModel((f"a{centre}", f"b{i}"), (st,), np.array([0.5]))
    return out


def test_tie_identity_and_universal():
    rng = np.random.default_rng(5)
    models = {**_pair_models(rng, 3, 0.2), **_pair_models(rng, 3, 0.8)}
    shared, mapping = tie_transitions(models, len(models))
    assert sorted(mapping.values()) == list(range(len(models)))
    for p, i in mapping.items():
        assert shared[i].states[0].to_dict() == models[p].states[0].to_dict()
    shared, mapping = tie_transitions(models, 1)
    assert len(shared) == 1 and set(mapping.values()) == {0}


def test_tie_planted_groups():
    rng = np.random.default_rng(6)
    g1, g2 = _pair_models(rng, 5, 0.2), _pair_models(rng, 5, 0.8)
    _, mapping = tie_transitions({**g1, **g2}, 2)
    assert len({mapping[p] for p in g1}) == 1 and len({mapping[p] for p in g2}) == 1
    assert mapping[next(iter(g1))] != mapping[next(iter(g2))]


def test_tie_reduces_with_warning():
    rng = np.random.default_rng(7)
    with pytest.warns(TyingWarning):
        shared, _ = tie_transitions(_pair_models(rng, 3, 0.5), 10)
    assert len(shared) == 3
