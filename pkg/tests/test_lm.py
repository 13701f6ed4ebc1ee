import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signtie.lm import BigramLM, estimate_bigram


def test_add_one_single_sentence():
    lm = estimate_bigram([["A", "B"]], ["A", "B"])
    assert lm.prob("B", "A") == pytest.approx(2 / 3, abs=1e-15)
    assert lm.prob("A", "A") == pytest.approx(1 / 3, abs=1e-15)
    assert lm.prob("A") == pytest.approx(2 / 3, abs=1e-15)


def test_empty_corpus_is_uniform():
    lm = estimate_bigram([], list("abcde"))
    assert np.allclose(np.exp(lm.log_probs), 0.2, atol=1e-15)
    assert np.allclose(np.exp(lm.log_start), 0.2, atol=1e-15)


def test_empty_vocabulary_rejected():
    with pytest.raises(ValueError):
        estimate_bigram([["a"]], [])


@settings(max_examples=100)
@given(st.lists(st.lists(st.sampled_from("abcdef"), max_size=10), max_size=20))
def test_rows_sum_to_one(corpus):
    lm = estimate_bigram(corpus, "abcdef")
    assert np.allclose(np.exp(lm.log_probs).sum(axis=1), 1.0, atol=1e-12, rtol=0)
    assert abs(np.exp(lm.log_start).sum() - 1.0) <= 1e-12


def test_unnormalized_rows_rejected():
    with pytest.raises(ValueError):
        BigramLM.from_probs(["a", "b"], [[0.5, 0.6], [0.5, 0.5]])


def test_arc_weights_scale_and_penalty():
    lm = estimate_bigram([["a", "b"], ["b", "a"]], ["a", "b"]).with_weights(2.0, -1.5)
    start, big = lm.arc_weights()
    assert np.allclose(big, 2.0 * lm.log_probs - 1.5)
    assert np.allclose(start, 2.0 * lm.log_start - 1.5)


def test_restrict_renormalizes():
    lm = estimate_bigram([list("abcab")], "abc").restrict(["a", "c"])
    assert lm.vocab == ("a", "c")
    assert np.allclose(np.exp(lm.log_probs).sum(axis=1), 1.0)


def test_dict_round_trip():
    lm = estimate_bigram([list("abba")], "ab").with_weights(0.7, -2.0)
    back = BigramLM.from_dict(lm.to_dict())
    assert np.array_equal(back.log_probs, lm.log_probs) and back.scale == 0.7 and back.penalty == -2.0
