"""Rank transform of ordinal responses and least-squares regression on ranks."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .datamodel import DesignMatrix
from .errors import DataError, DimensionError, InsufficientDataError, SingularDesignError

MIN_RANK = "min"
MID_RANK = "mid"


@dataclass(frozen=True)
class RankVector:
    ranks: np.ndarray
    convention: str


def rank_transform(y, convention=MIN_RANK) -> RankVector:
    """Map ordinal responses to ranks.

    Under the min-rank convention every observation of the lowest observed
    level gets rank 1 and each following level starts right after all the
    observations of the levels below it (``r[h+1] = r[h] + n_h``).  The
    mid-rank convention averages the positions a tie block occupies.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("cannot rank an empty response vector")
    levels, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    below = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(float)
    if convention == MIN_RANK:
        level_rank = below + 1.0
    elif convention == MID_RANK:
        level_rank = below + (counts + 1) / 2.0
    else:
        raise ValueError(f"unknown rank convention {convention!r}")
    return RankVector(level_rank[inverse.ravel()], convention)


@dataclass(frozen=True)
class RankLinearFit:
    beta0: float
    betas: np.ndarray
    sigma2: float
    coef_se: np.ndarray
    coef_p: np.ndarray
    df_resid: int
    names: tuple = ()
    convention: str = MIN_RANK

    @property
    def coef(self):
        """Intercept followed by slopes."""
        return np.concatenate([[self.beta0], self.betas])

    def to_dict(self):
        return {
            "beta0": self.beta0,
            "betas": self.betas.tolist(),
            "sigma2": self.sigma2,
            "se": self.coef_se.tolist(),
            "p_values": self.coef_p.tolist(),
            "df_resid": self.df_resid,
            "names": list(self.names),
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["beta0"]), np.asarray(d["betas"], float), float(d["sigma2"]),
                   np.asarray(d["se"], float), np.asarray(d["p_values"], float),
                   int(d["df_resid"]), tuple(d.get("names", ())), d.get("convention", MIN_RANK))


def _with_intercept(X):
    if isinstance(X, DesignMatrix):
        return X.with_intercept().matrix, X.with_intercept().column_names
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = ("(Intercept)",) + tuple(f"x{j + 1}" for j in range(X.shape[1]))
    return np.column_stack([np.ones(len(X)), X]), names


def ols(response, A):
    """QR least squares of ``response`` on the full matrix ``A``.

    Returns ``(coef, residuals, sigma2, se, df)``.
    """
    n, q = A.shape
    if n <= q:
        raise InsufficientDataError(f"insufficient data: n={n} for {q} coefficients")
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise SingularDesignError("singular design: columns are linearly dependent")
    coef = np.linalg.solve(R, Q.T @ response)
    resid = response - A @ coef
    df = n - q
    sigma2 = float(resid @ resid / df)
    Rinv = np.linalg.solve(R, np.eye(q))
    se = np.sqrt(sigma2 * np.sum(Rinv ** 2, axis=1))
    return coef, resid, sigma2, se, df


def fit_rank_linear(y, X, convention=MIN_RANK) -> RankLinearFit:
    """Regress the rank-transformed responses on ``X`` (intercept added)."""
    ranks = rank_transform(y, convention).ranks
    A, names = _with_intercept(X)
    if len(ranks) != len(A):
        raise DimensionError("responses and design have different lengths")
    n, q = A.shape
    if n <= q:
        raise InsufficientDataError(f"insufficient data: n={n} must exceed P+1={q}")
    coef, _, sigma2, se, df = ols(ranks, A)
    with np.errstate(divide="ignore", invalid="ignore"):
        tval = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.inf))
    pvals = 2 * stats.t.sf(np.abs(tval), df)
    return RankLinearFit(float(coef[0]), coef[1:], sigma2, se, pvals, df, names, convention)


def predict_rank_linear(fit: RankLinearFit, X) -> np.ndarray:
    """Fitted rank scores ``beta0 + X @ betas``."""
    M = X.regressors() if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.shape[1] != len(fit.betas):
        raise DimensionError(f"design has {M.shape[1]} columns, fit expects {len(fit.betas)}")
    return fit.beta0 + M @ fit.betas


def residual_diagnostics(y_cont, X):
    """QQ data for OLS residuals of a continuous response.

    Returns a dict of arrays: ``index`` (row of the sorted residual),
    ``residual``, ``empirical_q`` (sorted residuals) and ``theoretical_q``
    (normal quantiles at ``(i - 0.5)/n`` scaled by the residual SD).
    """
    y_cont = np.asarray(y_cont, dtype=float)
    A, _ = _with_intercept(X)
    if len(y_cont) != len(A):
        raise DimensionError("response and design have different lengths")
    _, resid, _, _, _ = ols(y_cont, A)
    n = len(resid)
    order = np.argsort(resid, kind="stable")
    sd = resid.std(ddof=1) if n > 1 else 0.0
    theo = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n) * sd
    return {
        "index": order,
        "residual": resid[order],
        "empirical_q": resid[order],
        "theoretical_q": theo,
    }


def diagnostics_csv(diag) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "residual", "empirical_q", "theoretical_q"])
    for i, r, e, t in zip(diag["index"], diag["residual"], diag["empirical_q"], diag["theoretical_q"]):
        w.writerow([int(i), repr(float(r)), repr(float(e)), repr(float(t))])
    return buf.getvalue()
