"""Guidance combiner algebra, ramp, and token sampling."""

import numpy as np
import pytest

from scalesr.guidance import combine, lambda_ramp, sample_tokens, softmax
from scalesr.numerics import Rng


def test_ramp_values():
    got = [lambda_ramp(k, 5, 2.0) for k in range(1, 6)]
    assert np.allclose(got, [0.4, 0.8, 1.2, 1.6, 2.0], atol=1e-15)
    assert lambda_ramp(5, 5, 3.5) == 3.5
    assert lambda_ramp(1, 5, 0.0) == 0.0
    with pytest.raises(ValueError):
        lambda_ramp(1, 0, 1.0)


def test_combine_zero_lambda_returns_positive_object():
    pos = np.arange(6.0).reshape(2, 3)
    neg = pos + 1.0
    assert combine(pos, neg, 0.0) is pos


def test_combine_identities():
    rng = Rng(0)
    pos = rng.stream("p").normal((4, 7))
    neg = rng.stream("n").normal((4, 7))
    assert np.allclose(combine(pos, pos, 3.0), pos, atol=1e-15)
    # shifting both branches by a constant shifts the combination by it
    c = 0.7321
    assert np.allclose(combine(pos + c, neg + c, 1.5),
                       combine(pos, neg, 1.5) + c, atol=1e-12)
    # linear in lambda
    a = combine(pos, neg, 1.0) - pos
    b = combine(pos, neg, 2.0) - pos
    assert np.allclose(2 * a, b, atol=1e-12)


def test_combined_softmax_is_tilted_posterior():
    """softmax(pos + lam (pos - neg)) == normalize(p_pos^(1+lam) / p_neg^lam)."""
    rng = Rng(3)
    for trial in range(5):
        r = rng.at_step(trial)
        p_pos = softmax(r.stream("p").normal((9,)))
        p_neg = softmax(r.stream("n").normal((9,)))
        lam = float(r.stream("lam").uniform(()) * 4)
        got = softmax(combine(np.log(p_pos), np.log(p_neg), lam))
        tilt = p_pos ** (1 + lam) / p_neg ** lam
        tilt /= tilt.sum()
        assert np.max(np.abs(got - tilt)) <= 1e-9


def test_log_gradient_identity():
    """d/dlam log softmax(combine)_i = s_i - E_combined[s], s = log(p_pos/p_neg)."""
    rng = Rng(5)
    lp = rng.stream("p").normal((8,))
    ln_ = rng.stream("n").normal((8,))
    lam, h = 1.3, 1e-6
    s = lp - ln_

    def logq(l):
        z = combine(lp, ln_, l)
        return z - np.log(np.exp(z - z.max()).sum()) - z.max()

    fd = (logq(lam + h) - logq(lam - h)) / (2 * h)
    q = softmax(combine(lp, ln_, lam))
    analytic = s - (q * s).sum()
    assert np.max(np.abs(fd - analytic)) <= 1e-5


def test_softmax_rows_sum_to_one():
    rng = Rng(1)
    x = rng.stream("x").normal((3, 4, 11)) * 30
    p = softmax(x)
    assert np.allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_sample_tokens_greedy():
    logits = np.array([[0.0, 2.0, 2.0, -1.0], [5.0, 1.0, 0.0, 0.0]])
    idx = sample_tokens(logits, Rng(0), greedy=True)
    assert idx.tolist() == [1, 0]  # first index wins ties
    assert idx.dtype == np.int64


def test_sample_tokens_deterministic_and_distributed():
    logits = np.zeros((2000, 3))
    logits[:, 1] = 1.0
    a = sample_tokens(logits, Rng(7).stream("s"))
    b = sample_tokens(logits, Rng(7).stream("s"))
    assert np.array_equal(a, b)
    freq = np.bincount(a, minlength=3) / len(a)
    expect = np.exp([0, 1, 0]) / np.exp([0, 1, 0]).sum()
    assert np.max(np.abs(freq - expect)) < 0.05


def test_sample_tokens_peaked_distribution():
    logits = np.zeros((50, 4))
    logits[:, 2] = 50.0
    idx = sample_tokens(logits, Rng(3))
    assert np.all(idx == 2)


def test_sample_tokens_temperature():
    rng = Rng(9)
    logits = rng.stream("l").normal((500, 6))
    cold = sample_tokens(logits, Rng(1).stream("s"), temperature=1e-4)
    assert np.array_equal(cold, np.argmax(logits, axis=-1))
    with pytest.raises(ValueError):
        sample_tokens(logits, Rng(1), temperature=0.0)