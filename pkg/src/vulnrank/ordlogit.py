"""Cumulative-logit (proportional odds) model.

``P(Y <= h | x) = logistic(alpha_h - x @ beta)`` with increasing thresholds
``alpha_1 < ... < alpha_{k-1}``; larger ``x @ beta`` shifts mass to higher
levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .datamodel import DesignMatrix
from .errors import DataError, DimensionError, EmptyCategoryError, SeparationError, SingularDesignError

SEPARATION_THRESHOLD = 50.0


@dataclass(frozen=True)
class OrderedLogitFit:
    alphas: np.ndarray
    betas: np.ndarray
    coef_se: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    names: tuple = ()
    loglik_trace: tuple = field(default=(), repr=False)

    @property
    def k(self):
        return len(self.alphas) + 1

    def to_dict(self):
        return {
            "alphas": self.alphas.tolist(),
            "betas": self.betas.tolist(),
            "se": self.coef_se.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "iterations": self.iterations,
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["alphas"], float), np.asarray(d["betas"], float),
                   np.asarray(d["se"], float), float(d["loglik"]), bool(d["converged"]),
                   int(d.get("iterations", 0)), tuple(d.get("names", ())))


def _matrix(X):
    if isinstance(X, DesignMatrix):
        return X.regressors()
    M = np.asarray(X, dtype=float)
    if M.ndim == 1:
        M = M.reshape(-1, 1) if M.size else M.reshape(0, 0)
    return M


def _cumulative(alphas, eta):
    """n x (k+1) matrix of P(Y <= h), h = 0..k."""
    n = len(eta)
    cum = np.empty((n, len(alphas) + 2))
    cum[:, 0] = 0.0
    cum[:, -1] = 1.0
    cum[:, 1:-1] = expit(alphas[None, :] - eta[:, None])
    return cum


def predict_probs(fit, X) -> np.ndarray:
    """Class probabilities, one row per observation, columns are levels 1..k."""
    M = _matrix(X)
    if M.shape[1] != len(fit.betas):
        raise DimensionError(f"design has {M.shape[1]} columns, fit expects {len(fit.betas)}")
    cum = _cumulative(np.asarray(fit.alphas, float), M @ np.asarray(fit.betas, float))
    probs = np.clip(np.diff(cum, axis=1), 0.0, None)
    return probs / probs.sum(axis=1, keepdims=True)


def predict_level(fit, X) -> np.ndarray:
    """Modal level per row (1-based); ties go to the lower level."""
    return np.argmax(predict_probs(fit, X), axis=1) + 1


def expected_level(fit, X) -> np.ndarray:
    probs = predict_probs(fit, X)
    return probs @ np.arange(1, probs.shape[1] + 1)


def _check_alphas(alphas):
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size < 1 or np.any(np.diff(alphas) <= 0):
        raise DataError("thresholds must be a strictly increasing vector", code="non-monotone-alphas")
    return alphas


def sample_responses(alphas, betas, X, rng_seed=None) -> np.ndarray:
    """Draw one response per row from the model's categorical distribution."""
    alphas = _check_alphas(alphas)
    M = _matrix(X)
    betas = np.asarray(betas, dtype=float)
    if M.shape[1] != len(betas):
        raise DimensionError(f"design has {M.shape[1]} columns, {len(betas)} slopes given")
    rng = np.random.default_rng(rng_seed)
    cum = _cumulative(alphas, M @ betas)[:, 1:-1]
    u = rng.random(len(M))
    return 1 + (u[:, None] > cum).sum(axis=1)


# -- likelihood -------------------------------------------------------------

def _loglik_parts(alphas, betas, M, y, k, want_hess=True):
    """Log-likelihood, gradient and Hessian in the natural (alpha, beta) space."""
    n, P = M.shape
    m = k - 1
    eta = M @ betas
    a_ext = np.concatenate([[-np.inf], alphas, [np.inf]])
    u = a_ext[y] - eta
    l = a_ext[y - 1] - eta
    Fu, Fl = expit(u), expit(l)
    fu, fl = Fu * (1 - Fu), Fl * (1 - Fl)
    # P(Y = y) computed from whichever tail is more accurate
    prob = np.where(l > 0, expit(-l) - expit(-u), Fu - Fl)
    prob = np.maximum(prob, 1e-300)
    ll = float(np.sum(np.log(prob)))

    Vu = np.zeros((n, m + P))
    Vl = np.zeros((n, m + P))
    rows = np.arange(n)
    top = y < k
    bot = y > 1
    Vu[rows[top], y[top] - 1] = 1.0
    Vl[rows[bot], y[bot] - 2] = 1.0
    Vu[top, m:] = -M[top]
    Vl[bot, m:] = -M[bot]
    dP = fu[:, None] * Vu - fl[:, None] * Vl
    gi = dP / prob[:, None]
    grad = gi.sum(axis=0)
    if not want_hess:
        return ll, grad, None
    fpu = fu * (1 - 2 * Fu)
    fpl = fl * (1 - 2 * Fl)
    H = (Vu * (fpu / prob)[:, None]).T @ Vu - (Vl * (fpl / prob)[:, None]).T @ Vl - gi.T @ gi
    return ll, grad, H


def _to_natural(theta, m):
    alphas = theta[0] + np.concatenate([[0.0], np.cumsum(np.exp(theta[1:m]))])
    return alphas, theta[m:]


def _to_theta(alphas, betas):
    return np.concatenate([[alphas[0]], np.log(np.diff(alphas)), betas])


def _theta_derivs(theta, M, y, k):
    m = k - 1
    alphas, betas = _to_natural(theta, m)
    ll, g, H = _loglik_parts(alphas, betas, M, y, k)
    q = len(theta)
    J = np.eye(q)
    e = np.exp(theta[1:m])
    for h in range(1, m):
        for j in range(1, h + 1):
            J[h, j] = e[j - 1]
    J[0, :m] = 0.0
    J[:m, 0] = 1.0
    J[0, 0] = 1.0
    gt = J.T @ g
    Ht = J.T @ H @ J
    # curvature contributed by alpha_h = alpha_1 + sum(exp(delta_j))
    for j in range(1, m):
        Ht[j, j] += e[j - 1] * g[j:m].sum()
    return ll, gt, Ht


def fit_ordered_logit(y, X, max_iter=200, tol=1e-8) -> OrderedLogitFit:
    """Maximum-likelihood fit by damped Newton (BFGS fallback).

    ``X`` must not contain an intercept column; the thresholds absorb it.
    """
    y = np.asarray(y, dtype=np.int64)
    M = _matrix(X)
    if isinstance(X, DesignMatrix) and X.includes_intercept:
        names = X.column_names[1:]
    elif isinstance(X, DesignMatrix):
        names = X.column_names
    else:
        names = tuple(f"x{j + 1}" for j in range(M.shape[1]))
    if M.shape[0] == 0 and y.size:
        M = np.empty((len(y), 0))
    if len(y) != len(M):
        raise DimensionError("responses and design have different lengths")
    k = int(y.max())
    if y.min() < 1:
        raise DataError("levels must be positive integers")
    counts = np.bincount(y, minlength=k + 1)[1:]
    if np.any(counts == 0):
        missing = [h + 1 for h in np.flatnonzero(counts == 0)]
        raise EmptyCategoryError(f"empty category: level(s) {missing} not observed")
    n, P = M.shape
    if P:
        if np.linalg.matrix_rank(np.column_stack([np.ones(n), M])) < P + 1:
            raise SingularDesignError("singular design: columns are linearly dependent")
    scale = M.std(axis=0) if P else np.empty(0)
    scale = np.where(scale > 0, scale, 1.0)

    m = k - 1
    cum_share = np.cumsum(counts)[:-1] / n
    alphas0 = logit(cum_share)
    theta = _to_theta(alphas0, np.zeros(P))
    ll, g, H = _theta_derivs(theta, M, y, k)
    trace = [ll]
    converged = False
    it = 0
    use_bfgs = False
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) < tol * max(1.0, np.sqrt(n)):
            converged = True
            it -= 1
            break
        try:
            L = np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            use_bfgs = True
            break
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        t = 1.0
        while True:
            cand = theta + t * step
            ll_c = _loglik_parts(*_to_natural(cand, m), M, y, k, want_hess=False)[0]
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-10:
                cand = theta
                ll_c = ll
                break
        if cand is theta:
            converged = np.linalg.norm(g) < 1e-4 * max(1.0, np.sqrt(n))
            break
        theta = cand
        ll, g, H = _theta_derivs(theta, M, y, k)
        trace.append(ll)
        _check_separation(theta[m:], scale)
    else:
        converged = np.linalg.norm(g) < tol * max(1.0, np.sqrt(n))

    if use_bfgs:
        res = optimize.minimize(
            lambda th: -_theta_derivs(th, M, y, k)[0],
            theta,
            jac=lambda th: -_theta_derivs(th, M, y, k)[1],
            method="BFGS",
            options={"gtol": tol, "maxiter": max_iter * 10},
        )
        theta = res.x
        ll, g, H = _theta_derivs(theta, M, y, k)
        trace.append(ll)
        converged = bool(res.success) or np.linalg.norm(g) < 1e-6 * max(1.0, np.sqrt(n))
        it += int(res.nit)

    alphas, betas = _to_natural(theta, m)
    _check_separation(betas, scale)
    _, _, Hn = _loglik_parts(alphas, betas, M, y, k)
    try:
        cov = np.linalg.inv(-Hn)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(m + P, np.nan)
    return OrderedLogitFit(alphas, betas, se, ll, bool(converged), it, tuple(names), tuple(trace))


def _check_separation(betas, scale):
    if betas.size and np.max(np.abs(betas * scale)) > SEPARATION_THRESHOLD:
        raise SeparationError("separation: slope estimates diverge, the MLE does not exist")
