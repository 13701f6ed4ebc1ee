from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from signtie.bundle import ModelBundle
from signtie.epenthesis import interpolate_transition
from signtie.frames import LAYOUT, NormalizationStats
from signtie.hmm import SignHMM, StateModel, StreamDensity, baum_welch_train
from signtie.lm import BigramLM
from signtie.synth import SynthConfig, make_vocab, sample_sign
from signtie.tying import cluster_stream_states

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_density(rng, dim, n_mix=1, spread=0.3, var=(0.01, 0.05)):
    w = rng.dirichlet(np.ones(n_mix)) if n_mix > 1 else np.ones(1)
    mu = 0.5 + spread * (rng.random((n_mix, dim)) - 0.5)
    v = rng.uniform(*var, size=(n_mix, dim))
    return StreamDensity(w, mu, v)


def random_state(rng, n_mix=1, **kw):
    return StateModel(tuple(random_density(rng, d, n_mix, **kw) for d in LAYOUT.dims))


def random_hmm(rng, sign="a", n_states=3, n_mix=1, self_loop=None, **kw):
    if self_loop is None:
        self_loop = rng.uniform(0.3, 0.8, size=n_states)
    return SignHMM(sign, tuple(random_state(rng, n_mix, **kw) for _ in range(n_states)),
                   np.asarray(self_loop, dtype=float))


def random_frames(rng, T):
    return rng.random((T, 48))


@pytest.fixture(scope="session")
def small_vocab():
    """Ground truth, trained models and held-out data for 12 signs."""
    cfg = SynthConfig(n_signs=12, separation=0.6, seed=3)
    gt, lm = make_vocab(cfg)
    rng = np.random.default_rng(7)
    models = [baum_welch_train([sample_sign(m, rng) for _ in range(4)], 3, 1, sign=m.sign) for m in gt]
    test = [sample_sign(m, rng) for m in gt for _ in range(3)]
    return {"cfg": cfg, "gt": gt, "lm": lm, "models": models, "test": test}


def random_bundle(rng, tied=True, transitions=True):
    """Fully populated bundle with arbitrary parameters."""
    V, n_mix = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    models = tuple(random_hmm(rng, f"g{i}", n_states=int(rng.integers(1, 4)), n_mix=n_mix) for i in range(V))
    lo = rng.normal(size=48)
    norm = NormalizationStats(lo, lo + rng.random(48))
    lm = BigramLM.from_probs([m.sign for m in models], rng.dirichlet(np.ones(V), size=V),
                             rng.dirichlet(np.ones(V)), scale=float(rng.random()), penalty=-float(rng.random()))
    b = ModelBundle(models, norm=norm, lm=lm, provenance={"seed": int(rng.integers(1000)), "x": float(rng.random())})
    if tied:
        b = b.with_tying(cluster_stream_states(list(models), int(rng.integers(1, 4)), seed=int(rng.integers(100))))
    if transitions:
        pairs = [(u.sign, v.sign) for u in models for v in models]
        shared = [interpolate_transition(models[0], models[-1], float(rng.uniform(0.1, 0.9)))]
        shared.append(interpolate_transition(models[-1], models[0]))
        b = replace(b, transitions=tuple(shared), transition_map={p: int(rng.integers(2)) for p in pairs})
    return b


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
