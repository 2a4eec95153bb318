import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from vulnrank.errors import EmptyCategoryError, SeparationError
from vulnrank.ordlogit import (
    OrderedLogitFit,
    expected_level,
    fit_ordered_logit,
    predict_level,
    predict_probs,
    sample_responses,
)


def make_fit(alphas, betas):
    m, p = len(alphas), len(betas)
    return OrderedLogitFit(np.asarray(alphas, float), np.asarray(betas, float),
                           np.zeros(m + p), 0.0, True, 0)


def probs_oracle(alphas, betas, X):
    out = []
    for row in X:
        eta = sum(b * x for b, x in zip(betas, row))
        cum = [0.0] + [1 / (1 + np.exp(-(a - eta))) for a in alphas] + [1.0]
        out.append([cum[h + 1] - cum[h] for h in range(len(alphas) + 1)])
    return np.array(out)


def test_intercept_only_closed_form():
    y = np.repeat([1, 2, 3, 4], 25)
    fit = fit_ordered_logit(y, np.empty((100, 0)))
    assert fit.alphas == pytest.approx([-1.0986, 0.0, 1.0986], abs=1e-4)
    assert fit.converged


def test_intercept_only_unequal_counts():
    y = np.repeat([1, 2, 3], [10, 30, 60])
    fit = fit_ordered_logit(y, np.empty((100, 0)))
    assert fit.alphas == pytest.approx(logit([0.1, 0.4]), abs=1e-6)


def test_recovery_single_draw():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5000, 2))
    alphas, betas = np.array([-1.0, 0.5, 2.0]), np.array([1.0, -0.5])
    y = sample_responses(alphas, betas, X, 1)
    fit = fit_ordered_logit(y, X)
    est = np.concatenate([fit.alphas, fit.betas])
    assert np.all(np.abs(est - np.concatenate([alphas, betas])) < 4 * fit.coef_se)


def test_empty_category():
    with pytest.raises(EmptyCategoryError):
        fit_ordered_logit([1, 1, 3, 3, 4], np.arange(5.0))


def test_separation():
    x = np.arange(20.0)
    y = np.where(x < 10, 1, 2)
    with pytest.raises(SeparationError):
        fit_ordered_logit(y, x)


def test_loglik_trace_monotone_and_gradient_small():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((300, 3))
    y = sample_responses([-1, 0, 1], [0.5, -1, 0.2], X, 3)
    fit = fit_ordered_logit(y, X)
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9)
    # numerical gradient at the optimum
    def ll(theta):
        f = make_fit(theta[:3], theta[3:])
        return np.log(predict_probs(f, X)[np.arange(300), y - 1]).sum()
    theta = np.concatenate([fit.alphas, fit.betas])
    eps = 1e-6
    grad = [(ll(theta + eps * e) - ll(theta - eps * e)) / (2 * eps) for e in np.eye(6)]
    assert np.abs(grad).max() < 1e-3


def test_shift_invariance_of_slopes():
    # shifting a covariate moves only the thresholds
    rng = np.random.default_rng(4)
    X = rng.standard_normal((400, 2))
    y = sample_responses([-1, 1], [1.0, 0.5], X, 5)
    a = fit_ordered_logit(y, X)
    b = fit_ordered_logit(y, X + np.array([3.0, 0.0]))
    assert np.allclose(a.betas, b.betas, atol=1e-6)
    assert np.allclose(b.alphas, a.alphas + 3.0 * a.betas[0], atol=1e-5)


class TestProbs:
    def test_symmetric_binary(self):
        assert np.allclose(predict_probs(make_fit([0.0], [0.0]), np.ones((3, 1))), 0.5)

    def test_large_score_goes_to_top_level(self):
        p = predict_probs(make_fit([-1, 0, 1], [1.0]), np.array([[1e3]]))
        assert p[0, 3] == pytest.approx(1.0)

    def test_formula_oracle(self):
        rng = np.random.default_rng(8)
        alphas = np.sort(rng.normal(size=4))
        betas = rng.normal(size=3)
        X = rng.normal(size=(30, 3))
        assert np.allclose(predict_probs(make_fit(alphas, betas), X),
                           probs_oracle(alphas, betas, X), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        p = predict_probs(make_fit([-2, 0, 3], [2.0, -1.0]), rng.normal(size=(50, 2)) * 5)
        assert np.allclose(p.sum(axis=1), 1.0) and p.min() >= 0

    def test_expected_level(self):
        f = make_fit([0.0], [0.0])
        assert expected_level(f, np.zeros((2, 1))).tolist() == [1.5, 1.5]


class TestLevel:
    def test_argmax(self):
        # thresholds chosen so the row probabilities are (0.1, 0.2, 0.6, 0.1)
        f = make_fit(logit([0.1, 0.3, 0.9]), [0.0])
        assert np.allclose(predict_probs(f, [[0.0]]), [[0.1, 0.2, 0.6, 0.1]])
        assert predict_level(f, [[0.0]]).tolist() == [3]

    def test_tie_goes_low(self):
        assert predict_level(make_fit([0.0], [0.0]), [[0.0]]).tolist() == [1]

    def test_argmax_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            f = make_fit(np.sort(rng.normal(size=3) * 2), rng.normal(size=2))
            X = rng.normal(size=(20, 2))
            p = predict_probs(f, X)
            assert predict_level(f, X).tolist() == [int(np.argmax(r)) + 1 for r in p]


class TestSampling:
    def test_symmetric_share(self):
        y = sample_responses([0.0], [0.0], np.zeros((10_000, 1)), 42)
        assert abs((y == 1).mean() - 0.5) < 0.02

    def test_determinism(self):
        X = np.random.default_rng(0).normal(size=(100, 2))
        a = sample_responses([-1, 1], [1, 2], X, 7)
        assert np.array_equal(a, sample_responses([-1, 1], [1, 2], X, 7))

    def test_frequency_oracle(self):
        X = np.array([[-1.0, 0.5], [0.3, 0.0], [2.0, -1.0]])
        alphas, betas = [-1.0, 0.2, 1.5], [0.8, -0.4]
        reps = 100_000
        big = np.repeat(X, reps, axis=0)
        y = sample_responses(alphas, betas, big, 99).reshape(3, reps)
        freq = np.stack([(y == h).mean(axis=1) for h in range(1, 5)], axis=1)
        assert np.abs(freq - probs_oracle(alphas, betas, X)).max() < 0.01

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_levels_in_range(self, seed):
        y = sample_responses([-1, 0, 1], [1.0], np.linspace(-3, 3, 30)[:, None], seed)
        assert y.min() >= 1 and y.max() <= 4


def test_serialisation_round_trip():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 2))
    fit = fit_ordered_logit(sample_responses([-1, 1], [1, 0.5], X, 1), X)
    again = OrderedLogitFit.from_dict(fit.to_dict())
    assert np.array_equal(again.alphas, fit.alphas) and np.array_equal(again.betas, fit.betas)
    assert np.allclose(predict_probs(again, X), predict_probs(fit, X))

