import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signtie import _kernels_py, kernels

BACKENDS = kernels.backends()
compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def _problem(seed, T, N):
    rng = np.random.default_rng(seed)
    emis = rng.normal(-5, 3, size=(T, N))
    a = rng.uniform(0.05, 0.95, size=N)
    return emis, np.log(a), np.log1p(-a)


def test_dispatch_reports_backend():
    assert kernels.BACKEND in BACKENDS


@given(st.integers(0, 10_000), st.integers(1, 25), st.integers(1, 6))
def test_python_viterbi_matches_bruteforce_dp(seed, T, N):
    emis, ls, lf = _problem(seed, T, N)
    score, path = _kernels_py.viterbi_lr(emis, ls, lf)
    if T < N:
        assert score == -np.inf
        return
    # independent O(T N) recursion written out with plain Python floats
    cur = [emis[0, 0]] + [-np.inf] * (N - 1)
    for t in range(1, T):
        cur = [max(cur[j] + ls[j], cur[j - 1] + lf[j - 1] if j else -np.inf) + emis[t, j] for j in range(N)]
    assert score == pytest.approx(cur[-1], abs=1e-9)
    again = emis[0, 0] + sum(emis[t, path[t]] + (ls[path[t]] if path[t] == path[t - 1] else lf[path[t - 1]])
                            for t in range(1, T))
    assert again == pytest.approx(score, abs=1e-9)


@compiled
@settings(max_examples=150)
@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 6))
def test_viterbi_parity(seed, T, N):
    emis, ls, lf = _problem(seed, T, N)
    s1, p1 = _kernels_py.viterbi_lr(emis, ls, lf)
    s2, p2 = BACKENDS["cython"].viterbi_lr(emis, ls, lf)
    assert s1 == s2 == -np.inf or s1 == pytest.approx(s2, abs=1e-9)
    assert np.array_equal(p1, p2)


@compiled
@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(1, 20))
def test_viterbi_batch_parity(seed, T):
    rng = np.random.default_rng(seed)
    U, S = 5, 5
    emis = rng.normal(-5, 3, size=(U, T, S))
    ns = rng.integers(1, S + 1, size=U)
    a = rng.uniform(0.05, 0.95, size=(U, S))
    ls, lf = np.log(a), np.log1p(-a)
    r1 = _kernels_py.viterbi_lr_batch(emis, ns, ls, lf)
    r2 = BACKENDS["cython"].viterbi_lr_batch(emis, ns, ls, lf)
    assert np.allclose(r1, r2, atol=1e-9, rtol=0)
    for u in range(U):
        single = _kernels_py.viterbi_lr(emis[u, :, : ns[u]], ls[u, : ns[u]], lf[u, : ns[u]])[0]
        assert r1[u] == pytest.approx(single, abs=1e-9) or r1[u] == single == -np.inf


@compiled
@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(1, 25), st.integers(1, 5))
def test_forward_backward_parity(seed, T, N):
    emis, ls, lf = _problem(seed, T, N)
    out1 = _kernels_py.forward_backward_lr(emis, ls, lf)
    out2 = BACKENDS["cython"].forward_backward_lr(emis, ls, lf)
    if T < N:
        assert out1[0] == out2[0] == -np.inf
        return
    assert out1[0] == pytest.approx(out2[0], abs=1e-9)
    for a, b in zip(out1[1:], out2[1:]):
        assert np.allclose(a, b, atol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 5))
def test_posteriors_normalized(seed, T, N):
    emis, ls, lf = _problem(seed, T, N)
    ll, gamma, sc, fc = kernels.forward_backward_lr(emis, ls, lf)
    if T < N:
        return
    assert np.allclose(gamma.sum(1), 1.0, atol=1e-9)
    # expected transitions out of t = 0..T-2 add up to T-1
    assert sc.sum() + fc.sum() == pytest.approx(T - 1, abs=1e-8)


@compiled
@settings(max_examples=100)
@given(st.integers(0, 10_000))
def test_lr_step_parity(seed):
    rng = np.random.default_rng(seed)
    U, S = 6, 4
    prev = np.where(rng.random((U, S)) < 0.2, -np.inf, rng.normal(-10, 4, size=(U, S)))
    phist = rng.integers(0, 100, size=(U, S))
    entry = np.where(rng.random(U) < 0.3, -np.inf, rng.normal(-10, 4, size=U))
    ehist = rng.integers(0, 100, size=U)
    emis = rng.normal(-3, 2, size=(U, S))
    ns = rng.integers(1, S + 1, size=U)
    a = rng.uniform(0.1, 0.9, size=(U, S))
    args = (prev, phist, entry, ehist, emis, np.log(a), np.log1p(-a), ns)
    r1 = _kernels_py.lr_step(*args)
    r2 = BACKENDS["cython"].lr_step(*args)
    assert np.array_equal(r1[2], r2[2])
    for u in range(U):
        n = ns[u]
        assert np.allclose(r1[0][u, :n], r2[0][u, :n], atol=1e-12, rtol=0)
        assert np.array_equal(r1[1][u, :n], r2[1][u, :n])


def test_read_only_inputs_accepted():
    emis, ls, lf = _problem(0, 10, 3)
    for arr in (emis, ls, lf):
        arr.flags.writeable = False
    for mod in BACKENDS.values():
        assert np.isfinite(mod.viterbi_lr(emis, ls, lf)[0])


def test_environment_forces_fallback():
    env = dict(os.environ, SIGNTIE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import signtie; print(signtie.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
