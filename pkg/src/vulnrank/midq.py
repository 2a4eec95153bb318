"""Mid-distribution functions and mid-quantile regression for ordinal data.

The conditional mid-CDF is estimated with a product kernel over mixed
covariates (Gaussian for continuous columns, geometric ``lam**|d|`` for
discrete ones) and the coefficients minimise the quadratic loss
``mean((p - G(h^{-1}(x @ beta) | x))**2)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .datamodel import CONTINUOUS, Dataset, DesignMatrix
from .errors import DataError, DimensionError, EmptyNeighborhoodError, InsufficientDataError

IDENTITY = "identity"
LOG = "log"
LINKS = (IDENTITY, LOG)

DEFAULT_DISCRETE_BANDWIDTH = 0.3


# -- unconditional mid-distribution ----------------------------------------

@dataclass(frozen=True)
class MidDistribution:
    support: np.ndarray
    mass: np.ndarray
    mid_cdf: np.ndarray

    def __post_init__(self):
        if len(self.support) == 0:
            raise DataError("empty distribution")
        if np.any(np.diff(self.support) <= 0):
            raise DataError("support must be strictly increasing")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1) > 1e-12:
            raise DataError("masses must be non-negative and sum to one")


def mid_cdf(sample) -> MidDistribution:
    """Empirical mid-CDF ``G(y) = P(Y <= y) - P(Y = y)/2`` at the atoms."""
    sample = np.asarray(sample, dtype=float).ravel()
    if sample.size == 0:
        raise DataError("mid_cdf needs a non-empty sample")
    support, counts = np.unique(sample, return_counts=True)
    mass = counts / counts.sum()
    return MidDistribution(support, mass, np.cumsum(mass) - mass / 2)


def mid_quantile(dist: MidDistribution, prob, full_output=False):
    """Mid-quantile: linear interpolation through ``(mid_cdf[h], support[h])``.

    Probabilities below the first (above the last) mid-CDF value are clamped
    to the smallest (largest) atom.  With ``full_output=True`` returns
    ``(value, censored)``.
    """
    if not 0 < prob < 1:
        raise DataError(f"probability must lie in (0, 1), got {prob}")
    pi, y = dist.mid_cdf, dist.support
    censored = bool(prob < pi[0] or prob > pi[-1])
    if prob <= pi[0]:
        value = float(y[0])
    elif prob >= pi[-1]:
        value = float(y[-1])
    else:
        value = float(np.interp(prob, pi, y))
    return (value, censored) if full_output else value


def check_loss(u, tau):
    """Quantile check loss ``u * (tau - 1{u < 0})``."""
    if not 0 < tau < 1:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def check_loss_quantile(sample, tau) -> float:
    """Intercept-only minimiser of the summed check loss.

    The objective is convex and piecewise linear with kinks at the data, so
    the smallest minimising data point is returned.
    """
    sample = np.sort(np.asarray(sample, dtype=float).ravel())
    if sample.size == 0:
        raise DataError("empty sample")
    losses = np.array([check_loss(sample - q, tau).sum() for q in sample])
    best = losses.min()
    return float(sample[np.flatnonzero(losses <= best + 1e-12 * max(1.0, abs(best)))[0]])


# -- kernels ----------------------------------------------------------------

@dataclass(frozen=True)
class KernelConfig:
    continuous_bandwidths: tuple = ()
    discrete_bandwidths: tuple = ()
    continuous_family: str = "gaussian"
    discrete_family: str = "geometric"

    def __post_init__(self):
        cb = tuple(float(b) for b in self.continuous_bandwidths)
        db = tuple(float(b) for b in self.discrete_bandwidths)
        if any(not b > 0 for b in cb):
            raise DataError("continuous bandwidths must be positive")
        if any(not 0 <= b < 1 for b in db):
            raise DataError("discrete bandwidths must lie in [0, 1)")
        object.__setattr__(self, "continuous_bandwidths", cb)
        object.__setattr__(self, "discrete_bandwidths", db)

    @classmethod
    def default(cls, continuous, discrete, discrete_bandwidth=DEFAULT_DISCRETE_BANDWIDTH):
        """Silverman's rule per continuous column, a fixed ``lam`` per discrete one."""
        continuous = np.asarray(continuous, dtype=float)
        discrete = np.asarray(discrete, dtype=float)
        n = continuous.shape[0] if continuous.ndim == 2 else 1
        bws = []
        for j in range(continuous.shape[1] if continuous.ndim == 2 else 0):
            sd = continuous[:, j].std(ddof=1) if n > 1 else 0.0
            bws.append(1.06 * sd * n ** (-0.2) if sd > 0 else 1.0)
        n_disc = discrete.shape[1] if discrete.ndim == 2 else 0
        return cls(tuple(bws), (discrete_bandwidth,) * n_disc)

    def to_dict(self):
        return {
            "continuous_bandwidths": list(self.continuous_bandwidths),
            "discrete_bandwidths": list(self.discrete_bandwidths),
            "continuous_family": self.continuous_family,
            "discrete_family": self.discrete_family,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["continuous_bandwidths"]), tuple(d["discrete_bandwidths"]),
                   d.get("continuous_family", "gaussian"), d.get("discrete_family", "geometric"))


def kernel_weights(train_cont, train_disc, at_cont, at_disc, kernel: KernelConfig):
    """Product-kernel weights, shape ``(n_points, n_train)``."""
    train_cont = np.atleast_2d(np.asarray(train_cont, float))
    train_disc = np.atleast_2d(np.asarray(train_disc, float))
    at_cont = np.atleast_2d(np.asarray(at_cont, float))
    at_disc = np.atleast_2d(np.asarray(at_disc, float))
    n = max(train_cont.shape[0], train_disc.shape[0])
    m = max(at_cont.shape[0], at_disc.shape[0])
    if train_cont.shape[1] != len(kernel.continuous_bandwidths) or \
            train_disc.shape[1] != len(kernel.discrete_bandwidths):
        raise DimensionError("kernel bandwidths do not match the covariates")
    log_w = np.zeros((m, n))
    for j, h in enumerate(kernel.continuous_bandwidths):
        u = (at_cont[:, j][:, None] - train_cont[:, j][None, :]) / h
        log_w -= 0.5 * u * u
    w = np.exp(log_w)
    for j, lam in enumerate(kernel.discrete_bandwidths):
        d = np.abs(at_disc[:, j][:, None] - train_disc[:, j][None, :])
        w *= np.power(lam, d)
    return w


def _dataset_kernel_arrays(ds: Dataset):
    cont = [c.values.astype(float) for c in ds.columns if c.kind == CONTINUOUS]
    disc = [c.values.astype(float) for c in ds.columns if c.kind != CONTINUOUS]
    n = ds.n
    return (np.column_stack(cont) if cont else np.empty((n, 0)),
            np.column_stack(disc) if disc else np.empty((n, 0)))


def _point_arrays(ds: Dataset, x):
    if isinstance(x, dict):
        x = [x[c.name] for c in ds.columns]
    x = list(x)
    if len(x) != len(ds.columns):
        raise DimensionError(f"covariate point has {len(x)} entries, dataset has {len(ds.columns)}")
    cont, disc = [], []
    for c, v in zip(ds.columns, x):
        if c.kind == CONTINUOUS:
            cont.append(float(v))
        elif c.levels is not None:
            if v not in c.levels:
                raise DataError(f"unknown level {v!r} for {c.name!r}", code="unknown-level")
            disc.append(float(c.levels.index(v)))
        else:
            disc.append(float(v))
    return np.array([cont]).reshape(1, -1), np.array([disc]).reshape(1, -1)


class MidCDFTable:
    """Conditional CDF / mid-CDF of ``y`` at the support points, per evaluation row."""

    def __init__(self, y, train_cont, train_disc, kernel, at_cont=None, at_disc=None):
        y = np.asarray(y, dtype=float)
        self.support = np.unique(y)
        if at_cont is None:
            at_cont, at_disc = train_cont, train_disc
        W = kernel_weights(train_cont, train_disc, at_cont, at_disc, kernel)
        total = W.sum(axis=1)
        if np.any(~(total > 0)):
            raise EmptyNeighborhoodError("empty neighborhood: zero kernel mass at evaluation point")
        below = (y[:, None] <= self.support[None, :]).astype(float)
        F = (W @ below) / total[:, None]
        F[:, -1] = 1.0
        mass = np.diff(F, axis=1, prepend=0.0)
        self.cdf = F
        self.mass = mass
        mid = F - mass / 2
        # support points a row puts no mass on are off its conditional
        # support: re-place them on the line through the row's own atoms
        empty = mass <= 1e-12
        for r in np.flatnonzero(empty.any(axis=1)):
            keep = ~empty[r]
            mid[r] = np.interp(self.support, self.support[keep], mid[r, keep])
        self.mid = mid
        atoms = ~empty
        self.first_atom = self.support[np.argmax(atoms, axis=1)]
        self.last_atom = self.support[len(self.support) - 1 - np.argmax(atoms[:, ::-1], axis=1)]
        self.density = total / len(y)

    def __len__(self):
        return self.mid.shape[0]

    def evaluate(self, t, with_slope=False):
        """Row-wise piecewise-linear mid-CDF at ``t`` (flat outside the support)."""
        z, G = self.support, self.mid
        rows = np.arange(len(G))
        if len(z) == 1:
            val = G[:, 0].copy()
            return (val, np.zeros_like(val)) if with_slope else val
        j = np.clip(np.searchsorted(z, t, side="right") - 1, 0, len(z) - 2)
        width = z[j + 1] - z[j]
        raw = (t - z[j]) / width
        # snap to knots so round-off in a linear predictor cannot leave a flat piece
        frac = np.clip(raw, 0.0, 1.0)
        frac[frac < 1e-10] = 0.0
        frac[frac > 1 - 1e-10] = 1.0
        lo, hi = G[rows, j], G[rows, j + 1]
        val = lo + frac * (hi - lo)
        if not with_slope:
            return val
        inside = (raw > 0) & (raw < 1)
        slope = np.where(inside, (hi - lo) / width, 0.0)
        return val, slope

    def invert(self, p):
        """Row-wise mid-quantile at level ``p``, clamped to each row's own atoms."""
        z, G = self.support, self.mid
        if len(z) == 1:
            return np.full(len(G), z[0])
        idx = (G < p).sum(axis=1)
        out = np.empty(len(G))
        low = idx == 0
        high = idx == len(z)
        mid = ~(low | high)
        out[low] = self.first_atom[low]
        out[high] = self.last_atom[high]
        r = np.flatnonzero(mid)
        j = idx[mid]
        g0, g1 = G[r, j - 1], G[r, j]
        out[mid] = z[j - 1] + (p - g0) / (g1 - g0) * (z[j] - z[j - 1])
        return out

    def censored_rows(self, p):
        return (p < self.mid[:, 0]) | (p > self.mid[:, -1])


def conditional_cdf(train: Dataset, x, y, kernel: KernelConfig) -> float:
    """Kernel-weighted empirical CDF of the responses at covariate point ``x``."""
    cont, disc = _dataset_kernel_arrays(train)
    pc, pd = _point_arrays(train, x)
    w = kernel_weights(cont, disc, pc, pd, kernel)[0]
    density = w.sum() / train.n
    if not density > 0:
        raise EmptyNeighborhoodError("empty neighborhood: zero kernel mass at x")
    resp = np.asarray(train.responses, dtype=float)
    return float(np.sum(w * (resp <= y)) / train.n / density)


def conditional_mid_cdf(train: Dataset, x, y, kernel: KernelConfig) -> float:
    """Conditional mid-CDF ``F(y|x) - m(y|x)/2``.

    Off the support the value is interpolated linearly between neighbouring
    support points and held constant outside their range.
    """
    cont, disc = _dataset_kernel_arrays(train)
    pc, pd = _point_arrays(train, x)
    table = MidCDFTable(train.responses, cont, disc, kernel, pc, pd)
    return float(table.evaluate(np.array([float(y)]))[0])


# -- regression ---------------------------------------------------------------

def _inverse_link(eta, link):
    return np.exp(eta) if link == LOG else eta


def _inverse_link_deriv(eta, link):
    return np.exp(eta) if link == LOG else np.ones_like(eta)


def _link(mu, link):
    return np.log(mu) if link == LOG else mu


@dataclass(frozen=True)
class MidQuantileFit:
    p: float
    betas: np.ndarray
    link: str
    kernel: KernelConfig
    objective_value: float
    converged: bool
    names: tuple = ()
    initial_objective: float = np.nan
    se: np.ndarray | None = None
    se_method: str | None = None
    se_censored: np.ndarray | None = None
    se_singular: np.ndarray | None = None
    n_censored_rows: int = 0
    evaluations: int = field(default=0, compare=False)

    def to_dict(self):
        def lst(a):
            return None if a is None else [None if not np.isfinite(v) else float(v) for v in a] \
                if np.asarray(a).dtype.kind == "f" else [bool(v) for v in a]
        return {
            "p": self.p,
            "link": self.link,
            "betas": lst(self.betas),
            "names": list(self.names),
            "objective": self.objective_value,
            "converged": self.converged,
            "se": lst(self.se),
            "se_method": self.se_method,
            "se_censored": lst(self.se_censored),
            "se_singular": lst(self.se_singular),
            "kernel": self.kernel.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        def arr(v, dtype=float):
            if v is None:
                return None
            return np.array([np.nan if x is None else x for x in v], dtype=dtype)
        return cls(float(d["p"]), arr(d["betas"]), d["link"], KernelConfig.from_dict(d["kernel"]),
                   float(d["objective"]), bool(d["converged"]), tuple(d.get("names", ())),
                   se=arr(d.get("se")), se_method=d.get("se_method"),
                   se_censored=arr(d.get("se_censored"), bool),
                   se_singular=arr(d.get("se_singular"), bool))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _prepare(X):
    if isinstance(X, DesignMatrix):
        D = X.with_intercept()
        cont, disc = D.kernel_covariates()
        return D.matrix, D.column_names, cont, disc
    A = np.asarray(X, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if not np.allclose(A[:, 0], 1.0):
        A = np.column_stack([np.ones(len(A)), A])
    names = ("(Intercept)",) + tuple(f"x{j}" for j in range(1, A.shape[1]))
    # raw matrices: treat every non-intercept column as continuous
    return A, names, A[:, 1:], np.empty((len(A), 0))


class _Problem:
    def __init__(self, y, A, table, p, link):
        self.y, self.A, self.table, self.p, self.link = y, A, table, p, link
        self.evals = 0

    def objective(self, beta):
        self.evals += 1
        eta = self.A @ beta
        with np.errstate(over="ignore"):
            t = _inverse_link(eta, self.link)
        r = self.p - self.table.evaluate(t)
        return float(r @ r / len(r))

    def residuals_and_jacobian(self, beta):
        eta = self.A @ beta
        t = _inverse_link(eta, self.link)
        g, slope = self.table.evaluate(t, with_slope=True)
        r = self.p - g
        J = -(slope * _inverse_link_deriv(eta, self.link))[:, None] * self.A
        return r, J


def _gauss_newton(problem, beta, fval, max_iter=50):
    """Exact steps on the current linear pieces of the mid-CDF; only improvements kept."""
    for _ in range(max_iter):
        r, J = problem.residuals_and_jacobian(beta)
        if not np.any(J):
            break
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        t, improved = 1.0, False
        while t > 1e-6:
            cand = beta + t * step
            fc = problem.objective(cand)
            if fc < fval:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        gain = fval - fc
        beta, fval = cand, fc
        if gain < 1e-16 or fval < 1e-30:
            break
    return beta, fval


def _nelder_mead(problem, x0, steps, fatol, maxfev):
    sim = np.vstack([x0, x0 + np.diag(steps)])
    res = optimize.minimize(problem.objective, x0, method="Nelder-Mead",
                            options={"initial_simplex": sim, "xatol": 1e-9, "fatol": fatol,
                                     "maxfev": maxfev, "adaptive": len(x0) > 3})
    return res.x, float(res.fun), bool(res.success)


def fit_midqr(y, X, p, kernel: KernelConfig | None = None, link=IDENTITY,
              n_restarts=5, seed=0, start=None, fatol=1e-10, maxfev=None) -> MidQuantileFit:
    """Mid-quantile regression of ordinal ``y`` at level ``p``.

    ``X`` is a design matrix; an intercept is added when missing.  Kernel
    covariates are the original columns recovered from the design coding.
    """
    if not 0 < p < 1:
        raise DataError(f"quantile level must lie in (0, 1), got {p}")
    if link not in LINKS:
        raise DataError(f"unknown link {link!r}")
    y = np.asarray(y, dtype=float)
    A, names, cont, disc = _prepare(X)
    n, q = A.shape
    if len(y) != n:
        raise DimensionError("responses and design have different lengths")
    if n <= q:
        raise InsufficientDataError(f"insufficient data: n={n} must exceed P+1={q}")
    if link == LOG and np.any(y <= 0):
        raise DataError("log link needs positive responses")
    if kernel is None:
        kernel = KernelConfig.default(cont, disc)
    table = MidCDFTable(y, cont, disc, kernel)
    problem = _Problem(y, A, table, p, link)

    if start is None:
        targets = _link(table.invert(p), link)
        start = np.linalg.lstsq(A, targets, rcond=None)[0]
    start = np.asarray(start, dtype=float)
    f0 = problem.objective(start)
    best_x, best_f, converged = start, f0, True

    z = table.support
    zspan = max(float(z[-1] - z[0]), 1.0)
    if link == LOG:
        zspan = max(np.log(z[-1] / z[0]), 0.1)
    col_sd = A.std(axis=0)
    col_sd = np.where(col_sd > 0, col_sd, 1.0)
    steps = 0.1 * zspan / col_sd
    maxfev = maxfev or 400 * q
    rng = np.random.default_rng(seed)

    if best_f > 0:
        for r in range(n_restarts + 1):
            x0 = best_x if r == 0 else best_x + rng.normal(0.0, 0.5, q) * steps
            x, f, ok = _nelder_mead(problem, x0, steps, fatol, maxfev)
            x, f = _gauss_newton(problem, x, f)
            if f < best_f:
                best_x, best_f, converged = x, f, ok
            elif r == 0:
                converged = ok
            if best_f <= 1e-30:
                break
    if best_f > f0:
        best_x, best_f = start, f0
    return MidQuantileFit(float(p), np.asarray(best_x), link, kernel, float(best_f), converged,
                          tuple(names), float(f0), evaluations=problem.evals)


def predict_midqr(fit: MidQuantileFit, X, clip=None) -> np.ndarray:
    """Scores ``h^{-1}(x @ beta)`` for each design row.

    Parameters
    ----------
    clip : (float, float), optional
        Bounds applied to the scores, typically the smallest and largest
        training response.  The fitting objective is flat beyond the
        response support, so values outside it are not identified.
    """
    if isinstance(X, DesignMatrix):
        A = X.with_intercept().matrix
    else:
        A = np.asarray(X, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if A.shape[1] == len(fit.betas) - 1:
            A = np.column_stack([np.ones(len(A)), A])
    if A.shape[1] != len(fit.betas):
        raise DimensionError(f"design has {A.shape[1]} columns, fit expects {len(fit.betas)}")
    scores = _inverse_link(A @ fit.betas, fit.link)
    if clip is not None:
        scores = np.clip(scores, clip[0], clip[1])
    return scores


# -- standard errors ----------------------------------------------------------

def _fd_hessian(f, x, rel=1e-4):
    q = len(x)
    h = rel * np.maximum(np.abs(x), 1.0)
    H = np.empty((q, q))
    f0 = f(x)
    for i in range(q):
        ei = np.zeros(q)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, q):
            ej = np.zeros(q)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) \
                / (4 * h[i] * h[j])
    return H


def _kernel_se(fit, y, A, cont, disc):
    n, q = A.shape
    table = MidCDFTable(y, cont, disc, fit.kernel)
    problem = _Problem(y, A, table, fit.p, fit.link)
    H = _fd_hessian(problem.objective, fit.betas)
    eta = A @ fit.betas
    t = _inverse_link(eta, fit.link)
    g, slope = table.evaluate(t, with_slope=True)
    censored = table.censored_rows(fit.p)
    target = np.clip(fit.p, table.mid[:, 0], table.mid[:, -1])
    r = target - g
    grad_g = (slope * _inverse_link_deriv(eta, fit.link))[:, None] * A
    scores = -2.0 * r[:, None] * grad_g
    meat = scores.T @ scores / n

    evals, evecs = np.linalg.eigh((H + H.T) / 2)
    tol = 1e-10 * max(np.abs(evals).max(), 1e-300)
    good = evals > tol
    singular = np.zeros(q, dtype=bool)
    if not np.all(good):
        null = evecs[:, ~good]
        singular = np.abs(null).max(axis=1) > 1e-6
    inv = (evecs[:, good] / evals[good]) @ evecs[:, good].T
    cov = inv @ meat @ inv / n
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    se[singular] = np.nan
    flagged = np.zeros(q, dtype=bool)
    if censored.any():
        flagged = np.any(A[censored] != 0, axis=0)
    return se, flagged, singular, int(censored.sum())


def midqr_se(fit: MidQuantileFit, y, X, method="bootstrap", B=200, seed=0):
    """Standard errors for a mid-quantile fit; returns the fit with SEs attached.

    ``kernel``: sandwich covariance from a finite-difference Hessian of the
    loss; rows whose level ``p`` falls outside their mid-CDF range are clamped
    to the boundary and the coordinates they load on are flagged.
    ``bootstrap``: SD of refitted coefficients over ``B`` row resamples.
    """
    y = np.asarray(y, dtype=float)
    A, _, cont, disc = _prepare(X)
    n, q = A.shape
    if method == "kernel":
        se, flagged, singular, n_cens = _kernel_se(fit, y, A, cont, disc)
        return replace(fit, se=se, se_method="kernel", se_censored=flagged,
                       se_singular=singular, n_censored_rows=n_cens)
    if method != "bootstrap":
        raise DataError(f"unknown SE method {method!r}")
    if B < 50:
        raise DataError("bootstrap needs B >= 50 replicates")
    rng = np.random.default_rng(seed)
    draws = []
    for b in range(B):
        idx = rng.integers(0, n, n)
        try:
            refit = _fit_arrays(y[idx], A[idx], cont[idx], disc[idx], fit, seed=b)
        except (EmptyNeighborhoodError, InsufficientDataError):
            continue
        draws.append(refit)
    draws = np.array(draws)
    se = draws.std(axis=0, ddof=1) if len(draws) > 1 else np.full(q, np.nan)
    return replace(fit, se=se, se_method="bootstrap", se_censored=np.zeros(q, dtype=bool),
                   se_singular=~np.isfinite(se))


def _fit_arrays(y, A, cont, disc, fit, seed):
    table = MidCDFTable(y, cont, disc, fit.kernel)
    problem = _Problem(y, A, table, fit.p, fit.link)
    z = table.support
    zspan = max(float(z[-1] - z[0]), 1.0) if fit.link == IDENTITY else max(np.log(z[-1] / z[0]), 0.1)
    col_sd = A.std(axis=0)
    steps = 0.1 * zspan / np.where(col_sd > 0, col_sd, 1.0)
    x0 = fit.betas
    f0 = problem.objective(x0)
    x, f, _ = _nelder_mead(problem, x0, steps, 1e-10, 400 * len(x0))
    x, f = _gauss_newton(problem, x, f)
    return x if f <= f0 else x0
