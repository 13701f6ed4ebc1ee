import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signtie.decoder import (BeamConfig, DecodeError, DecodeNetwork, active_unit_scores, active_units, decode,
                             lookahead_score)
from signtie.epenthesis import TransitionModel, interpolate_transition
from signtie.hmm import viterbi_score
from signtie.lm import BigramLM
from signtie.synth import SynthConfig, make_vocab, sample_sentence
from signtie.tying import cluster_stream_states, score_tables, untied_model_set

from conftest import random_hmm, random_state


def _span_table(emis, log_self, log_fwd):
    """best[a, b]: unit entered at frame a and in its last state at frame b."""
    T, n = emis.shape
    best = np.full((T, T), -np.inf)
    for a in range(T):
        cur = [emis[a, 0]] + [-np.inf] * (n - 1)
        best[a, a] = cur[-1]
        for t in range(a + 1, T):
            cur = [max(cur[j] + log_self[j], cur[j - 1] + log_fwd[j - 1] if j else -np.inf) + emis[t, j]
                   for j in range(n)]
            best[a, t] = cur[-1]
    return best


def brute_force(frames, models, lm, trans=None):
    """Exhaustive maximum over sign sequences and unit boundaries."""
    T = len(frames)
    start, big = lm.arc_weights()
    li = lm.index
    spans = {m.sign: _span_table(m.emissions(frames), m.log_self, m.log_fwd) for m in models}
    exit_w = {m.sign: m.log_fwd[-1] for m in models}
    tspans = {p: (_span_table(tm.emissions(frames), tm.log_self, tm.log_fwd), tm.log_fwd[-1])
              for p, tm in (trans or {}).items()}
    best = [-np.inf, None]

    def go(t, prev, score, seq):
        for m in models:
            v = m.sign
            if prev is None:
                entries = [(t, score + start[li[v]])]
            else:
                base = score + big[li[prev], li[v]]
                if (prev, v) in tspans:
                    tab, tw = tspans[(prev, v)]
                    entries = [(e + 1, base + tab[t, e] + tw) for e in range(t, T - 1)]
                else:
                    entries = [(t, base)]
            for t0, s0 in entries:
                if not np.isfinite(s0):
                    continue
                for end in range(t0, T):
                    s = s0 + spans[v][t0, end]
                    if not np.isfinite(s):
                        continue
                    if end == T - 1:
                        if s > best[0]:
                            best[0], best[1] = s, seq + (v,)
                    else:
                        go(end + 1, v, s + exit_w[v], seq + (v,))

    go(0, None, 0.0, ())
    return best[0], best[1]


def _instance(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(1, 4))
    models = [random_hmm(rng, f"w{i}", n_states=int(rng.integers(1, 4))) for i in range(V)]
    probs = rng.dirichlet(np.ones(V), size=V)
    lm = BigramLM.from_probs([m.sign for m in models], probs, rng.dirichlet(np.ones(V)),
                             scale=float(rng.uniform(0.5, 2)), penalty=float(rng.uniform(-3, 0)))
    kind = seed % 3
    if kind == 0:
        trans = None
    else:
        trans = {}
        for u in models:
            for v in models:
                if kind == 1:
                    trans[(u.sign, v.sign)] = interpolate_transition(u, v)
                else:
                    n = int(rng.choice([1, 3]))
                    trans[(u.sign, v.sign)] = TransitionModel(
                        (u.sign, v.sign), tuple(random_state(rng) for _ in range(n)), rng.uniform(0.2, 0.8, n))
    T = int(rng.integers(3, 10))
    frames = 0.5 + 0.3 * (rng.random((T, 48)) - 0.5)
    return models, lm, trans, frames


def test_exact_decode_matches_brute_force():
    checked = 0
    for seed in range(120):
        models, lm, trans, frames = _instance(seed)
        ref_score, ref_signs = brute_force(frames, models, lm, trans)
        net = DecodeNetwork(untied_model_set(models), lm, trans)
        if ref_signs is None:
            with pytest.raises(DecodeError):
                decode(frames, net)
            continue
        res = decode(frames, net)
        assert res.score == pytest.approx(ref_score, abs=1e-8)
        assert res.signs == ref_signs
        checked += 1
    assert checked >= 100


def test_segments_cover_and_chain_is_consistent():
    cfg = SynthConfig(n_signs=5, seed=2)
    gt, lm = make_vocab(cfg)
    rng = np.random.default_rng(3)
    net = DecodeNetwork(untied_model_set(gt), lm, "interpolate")
    s = sample_sentence(gt, lm, True, (2, 4), rng)
    res = decode(s, net)
    assert res.segments[-1][2] == len(s) - 1
    assert all(a <= b for _, a, b in res.segments)
    assert all(p[2] < q[1] for p, q in zip(res.segments, res.segments[1:]))
    assert res.hypothesis.chain == tuple((w, e) for w, _, e in res.segments)
    assert res.hypothesis.sign == res.signs[-1]
    assert res.signs == s.signs


def test_direct_arcs_leave_no_gap():
    cfg = SynthConfig(n_signs=4, seed=4)
    gt, lm = make_vocab(cfg)
    rng = np.random.default_rng(5)
    s = sample_sentence(gt, lm, False, (2, 4), rng)
    res = decode(s, DecodeNetwork(untied_model_set(gt), lm))
    assert res.segments[0][1] == 0
    assert all(p[2] + 1 == q[1] for p, q in zip(res.segments, res.segments[1:]))


def test_single_sign_network_equals_viterbi():
    rng = np.random.default_rng(6)
    m = random_hmm(rng, "solo")
    net = DecodeNetwork(untied_model_set([m]), BigramLM.uniform(["solo"]))
    x = 0.5 + 0.3 * (rng.random((4, 48)) - 0.5)
    # four frames cannot hold two three-state signs, so the path is the single sign
    assert decode(x, net).score == pytest.approx(viterbi_score(m, x)[0], abs=1e-9)


def test_restricted_network():
    cfg = SynthConfig(n_signs=6, seed=7)
    gt, lm = make_vocab(cfg)
    net = DecodeNetwork(untied_model_set(gt), lm, "interpolate").restrict([gt[2].sign])
    x = np.random.default_rng(8).random((5, 48))
    assert net.n_signs == 1
    assert decode(x, net).score == pytest.approx(viterbi_score(gt[2], x)[0], abs=1e-8)


@pytest.fixture(scope="module")
def world():
    cfg = SynthConfig(n_signs=10, seed=11)
    gt, lm = make_vocab(cfg)
    tms = cluster_stream_states(gt, 8)
    return gt, lm, tms


def test_infinite_unit_threshold_bit_identical(world):
    gt, lm, tms = world
    net = DecodeNetwork(tms, lm, "interpolate")
    rng = np.random.default_rng(12)
    for _ in range(5):
        s = sample_sentence(gt, lm, True, (2, 5), rng)
        a = decode(s, net, BeamConfig(unit_threshold=math.inf))
        b = decode(s, net)
        assert a.score == b.score and a.segments == b.segments


def test_single_sign_unit_always_active():
    rng = np.random.default_rng(13)
    tms = untied_model_set([random_hmm(rng, "x")])
    _, comb = active_unit_scores(score_tables(tms.codebook, rng.random((7, 48))), tms)
    assert active_units(comb, 0.0).all()
    assert active_units(np.array([[0.0, -1e9]]), math.inf).all()


def test_unit_score_is_best_state_lookup(world):
    gt, _, tms = world
    x = np.random.default_rng(14).random((3, 48))
    tables = score_tables(tms.codebook, x)
    per, comb = active_unit_scores(tables, tms)
    for u in range(len(tms)):
        for s in range(6):
            want = max(tables[s][1, tms.mapping[u, j, s]] for j in range(tms.n_states[u]))
            assert per[1, u, s] == want
    assert np.allclose(comb, per.sum(axis=2))


# the default threshold is infinite (exact decoding); recall is checked at a finite one
UNIT_THRESHOLD = 50.0


def test_true_sign_active_at_finite_threshold(world):
    gt, lm, tms = world
    rng = np.random.default_rng(15)
    hits = total = 0
    for _ in range(30):
        s, align = sample_sentence(gt, lm, False, (2, 5), rng, return_alignment=True)
        _, comb = active_unit_scores(score_tables(tms.codebook, s.frames), tms)
        act = active_units(comb, UNIT_THRESHOLD)
        for t, w in enumerate(align):
            hits += act[t, tms.index[w]]
            total += 1
    assert hits / total >= 0.99


def test_lookahead_arithmetic():
    rng = np.random.default_rng(16)
    emis = rng.normal(-20, 5, size=(3, 8, 3))
    ns = np.array([3, 2, 3])
    for t in (0, 3, 4):
        want = 0.5 * (emis[0, t, 2] + emis[1, t, 0]) + np.mean(emis[1, t + 1:t + 4, 0])
        assert lookahead_score(emis, ns, 0, 1, t) == pytest.approx(want, abs=1e-12)
    # truncated window: a single frame left
    assert lookahead_score(emis, ns, 2, 1, 6) == pytest.approx(0.5 * (emis[2, 6, 2] + emis[1, 6, 0]) + emis[1, 7, 0],
                                                              abs=1e-12)


def test_lookahead_ranking_with_shared_first_state():
    rng = np.random.default_rng(17)
    emis = rng.normal(-20, 5, size=(3, 8, 3))
    emis[1, :, 0] = emis[2, :, 0]
    ns = np.full(3, 3)
    a, b = lookahead_score(emis, ns, 0, 1, 2), lookahead_score(emis, ns, 0, 2, 2)
    assert a == pytest.approx(b, abs=1e-12)


def test_all_pruned_raises():
    rng = np.random.default_rng(18)
    tms = untied_model_set([random_hmm(rng, "a"), random_hmm(rng, "b")])
    net = DecodeNetwork(tms, BigramLM.uniform(["a", "b"]))
    with pytest.raises(DecodeError, match="widen|too short"):
        decode(rng.random((2, 48)), net)
    with pytest.raises(DecodeError):
        decode(np.zeros((0, 48)), net)


def test_beam_config_validation():
    with pytest.raises(ValueError):
        BeamConfig(state_beam=-1)
    assert BeamConfig().exact and not BeamConfig(sign_beam=3).exact


def test_lm_vocabulary_must_match(world):
    _, lm, tms = world
    with pytest.raises(ValueError):
        DecodeNetwork(tms, BigramLM.uniform(["other"]))


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.sampled_from(["state_beam", "sign_beam", "lookahead_beam"]))
def test_beam_monotonicity(seed, which):
    cfg = SynthConfig(n_signs=6, seed=seed % 7)
    gt, lm = make_vocab(cfg)
    net = _net_cache(cfg.seed, gt, lm)
    s = sample_sentence(gt, lm, True, (2, 4), np.random.default_rng(seed))
    scores = []
    for b in (2.0, 5.0, 10.0, math.inf):
        try:
            scores.append(decode(s, net, BeamConfig(**{which: b})).score)
        except DecodeError:
            scores.append(-math.inf)
    assert all(y >= x - 1e-9 for x, y in zip(scores, scores[1:]))


_NETS = {}


def _net_cache(key, gt, lm):
    if key not in _NETS:
        _NETS[key] = DecodeNetwork(untied_model_set(gt), lm, "interpolate")
    return _NETS[key]
