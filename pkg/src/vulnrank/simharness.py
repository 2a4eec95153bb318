"""Monte Carlo comparison of ordered logit, rank-linear and mid-quantile fits.

Each iteration draws two standard-normal and two three-level categorical
covariates, generates ordinal responses from a cumulative-logit model, fits
all models on the training part and scores the test part with RGA and AGR.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import expit, logit

from . import accuracy
from .datamodel import Column, Dataset, encode_design
from .errors import ConfigError, VulnRankError
from .midq import KernelConfig, fit_midqr, midqr_se, predict_midqr
from .ordlogit import fit_ordered_logit, predict_level, sample_responses
from .ranklinear import fit_rank_linear, predict_rank_linear

# Rounded ordered-logit estimates from the non-uniform k=4 study, used as a
# stand-in for the unpublished generator coefficients.
DEFAULT_BETA = (-3.1, 2.1, 1.0, 4.1, -2.1, 4.1)
DEFAULT_TAUS = (0.1, 0.3, 0.5, 0.7, 0.9)
GENERIC_SHIFT = 0.5

ORDLOG = "OrdLog"
LINREG = "LinReg"
SELF = "Self"
INDICES = ("RGA", "AGR")


def midqr_name(tau):
    return f"MidQR({tau:g})"


@dataclass(frozen=True)
class SimulationConfig:
    n_tr: int = 320
    n_test: int = 80
    k: int = 4
    n_iter: int = 100
    beta_true: tuple = DEFAULT_BETA
    alpha_true: tuple | None = None
    marginal: str = "generic"
    quantile_levels: tuple = DEFAULT_TAUS
    seed: int = 0
    significance_level: float = 0.05
    midqr_link: str = "identity"
    midqr_se_method: str = "kernel"
    midqr_clip: bool = False
    bootstrap_reps: int = 200
    discrete_bandwidth: float = 0.3
    n_restarts: int = 5
    n_probe: int = 1_000_000
    jobs: int = 1

    def __post_init__(self):
        for name in ("n_tr", "n_test", "n_iter"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if len(self.beta_true) != 6:
            raise ConfigError("beta_true needs 6 entries (2 continuous + 2x2 dummies)")
        taus = tuple(float(t) for t in self.quantile_levels)
        if any(not 0 < t < 1 for t in taus):
            raise ConfigError("quantile levels must lie strictly inside (0, 1)")
        object.__setattr__(self, "quantile_levels", taus)
        if self.alpha_true is not None:
            a = tuple(float(v) for v in self.alpha_true)
            if len(a) != self.k - 1 or any(b <= a_ for a_, b in zip(a, a[1:])):
                raise ConfigError("alpha_true must be k-1 strictly increasing values")
            object.__setattr__(self, "alpha_true", a)
        elif self.marginal not in ("uniform", "generic"):
            raise ConfigError("marginal must be 'uniform' or 'generic'")
        if self.midqr_se_method not in ("kernel", "bootstrap", "both"):
            raise ConfigError("midqr_se_method must be kernel, bootstrap or both")

    @classmethod
    def from_mapping(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation option(s): {sorted(unknown)}")
        d = dict(d)
        for key in ("beta_true", "alpha_true", "quantile_levels"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def generate_covariates(n, rng_seed=None) -> Dataset:
    """Two N(0, 1) columns and two equiprobable three-level factors."""
    rng = np.random.default_rng(rng_seed)
    cont = rng.standard_normal((n, 2))
    cat = rng.integers(0, 3, size=(n, 2))
    return Dataset((
        Column.continuous("x3", cont[:, 0]),
        Column.continuous("x4", cont[:, 1]),
        Column("x1", "categorical", cat[:, 0], (1, 2, 3)),
        Column("x2", "categorical", cat[:, 1], (1, 2, 3)),
    ))


def calibrate_uniform_alphas(beta_true, k, n_probe=1_000_000, rng_seed=0):
    """Thresholds giving a uniform marginal distribution over the k levels.

    Solves ``mean(logistic(alpha_h - eta)) = h/k`` over a probe sample of
    linear predictors ``eta``; with ``eta == 0`` this is ``logit(h/k)``.
    """
    beta_true = np.asarray(beta_true, dtype=float)
    eta = encode_design(generate_covariates(n_probe, rng_seed)).matrix @ beta_true
    alphas = []
    for h in range(1, k):
        target = h / k
        lo = logit(target) + eta.min() - 1.0
        hi = logit(target) + eta.max() + 1.0
        alphas.append(optimize.brentq(lambda a: expit(a - eta).mean() - target, lo, hi, xtol=1e-12))
    return np.array(alphas)


def generic_alphas(k, shift=GENERIC_SHIFT):
    return logit(np.arange(1, k) / k) + shift


def resolve_alphas(config: SimulationConfig):
    if config.alpha_true is not None:
        return np.array(config.alpha_true)
    if config.marginal == "uniform":
        return calibrate_uniform_alphas(config.beta_true, config.k, config.n_probe, config.seed)
    return generic_alphas(config.k)


def model_names(config):
    return [ORDLOG, LINREG] + [midqr_name(t) for t in config.quantile_levels]


def _significant(est, se, df=None, level=0.05):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(est / se)
    p = 2 * (stats.t.sf(z, df) if df else stats.norm.sf(z))
    return np.where(np.isfinite(p), p < level, False)


def _iteration(args):
    config, alphas, it = args
    ss = np.random.SeedSequence([config.seed, it])
    s_xtr, s_xte, s_ytr, s_yte, s_fit = ss.spawn(5)
    beta = np.array(config.beta_true)
    Xtr = encode_design(generate_covariates(config.n_tr, s_xtr))
    Xte = encode_design(generate_covariates(config.n_test, s_xte))
    ytr = sample_responses(alphas, beta, Xtr, s_ytr)
    yte = sample_responses(alphas, beta, Xte, s_yte)
    out = {"self": accuracy.self_reference(yte), "models": {}}
    level = config.significance_level

    def record(name, fn):
        try:
            coef, se, sig, scores, extra = fn()
            out["models"][name] = {
                "coef": coef, "se": se, "sig": sig,
                "rga": accuracy.rga(scores, yte), "agr": accuracy.agr(scores, yte),
                "error": None, **extra,
            }
        except (VulnRankError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out["models"][name] = {"error": f"{type(exc).__name__}: {exc}"}

    def ordlog():
        f = fit_ordered_logit(ytr, Xtr)
        m = len(f.alphas)
        coef = np.concatenate([f.betas, f.alphas])
        se = np.concatenate([f.coef_se[m:], f.coef_se[:m]])
        return coef, se, _significant(coef, se, level=level), predict_level(f, Xte), {}

    def linreg():
        f = fit_rank_linear(ytr, Xtr)
        return f.coef, f.coef_se, f.coef_p < level, predict_rank_linear(f, Xte), {}

    record(ORDLOG, ordlog)
    record(LINREG, linreg)
    fit_seed = int(s_fit.generate_state(1)[0])
    for tau in config.quantile_levels:
        def midqr(tau=tau):
            f = fit_midqr(ytr, Xtr, tau, link=config.midqr_link, n_restarts=config.n_restarts,
                          seed=fit_seed,
                          kernel=KernelConfig.default(*Xtr.kernel_covariates(),
                                                      discrete_bandwidth=config.discrete_bandwidth))
            extra = {}
            se = None
            if config.midqr_se_method in ("kernel", "both"):
                fk = midqr_se(f, ytr, Xtr, "kernel")
                se = fk.se
                extra["censored"] = fk.se_censored
            if config.midqr_se_method in ("bootstrap", "both"):
                fb = midqr_se(f, ytr, Xtr, "bootstrap", B=config.bootstrap_reps, seed=fit_seed)
                extra["se_bootstrap"] = fb.se
                extra["sig_bootstrap"] = _significant(f.betas, fb.se, level=level)
                if se is None:
                    se = fb.se
            clip = (ytr.min(), ytr.max()) if config.midqr_clip else None
            scores = predict_midqr(f, Xte, clip=clip)
            return f.betas, se, _significant(f.betas, se, level=level), scores, extra
        record(midqr_name(tau), midqr)
    return out


def coefficient_names(config):
    base = ["x3", "x4", "x1[2]", "x1[3]", "x2[2]", "x2[3]"]
    return {
        ORDLOG: base + [f"alpha[{h}|{h + 1}]" for h in range(1, config.k)],
        LINREG: ["(Intercept)"] + base,
        **{midqr_name(t): ["(Intercept)"] + base for t in config.quantile_levels},
    }


@dataclass
class CoefSummary:
    model: str
    coef: str
    est: float
    se: float
    reg_se: float | None
    mcse: float
    pct_sign: float
    se_bootstrap: float | None = None
    pct_sign_bootstrap: float | None = None
    pct_censored: float | None = None


@dataclass
class SimulationSummary:
    config: dict
    alphas: list
    models: list
    coefficients: list
    indices: dict
    self_mean: float
    self_sd: float
    raw: dict
    raw_self: list
    failures: dict = field(default_factory=dict)

    def to_dict(self):
        return _clean(asdict(self))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def coefficient_table_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "coef", "est", "se", "reg_se", "mcse", "pct_sign"])
        for c in self.coefficients:
            w.writerow([c.model, c.coef, _num(c.est), _num(c.se),
                        "N.D." if c.reg_se is None else _num(c.reg_se), _num(c.mcse),
                        _num(c.pct_sign)])
        return buf.getvalue()

    def index_table_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "rga_mean", "rga_sd", "agr_mean", "agr_sd"])
        for m in self.models:
            d = self.indices[m]
            w.writerow([m, _num(d["rga_mean"]), _num(d["rga_sd"]), _num(d["agr_mean"]),
                        _num(d["agr_sd"])])
        w.writerow([SELF, _num(self.self_mean), _num(self.self_sd), _num(self.self_mean),
                    _num(self.self_sd)])
        return buf.getvalue()


def _num(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "nan"
    return repr(float(x))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _sd(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(values.std(ddof=1)) if len(values) > 1 else float("nan")


def _mean(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(values.mean()) if len(values) else float("nan")


def summarize(config, alphas, results) -> SimulationSummary:
    names = model_names(config)
    coef_names = coefficient_names(config)
    coefficients, indices, raw, failures = [], {}, {}, {}
    for m in names:
        runs = [r["models"][m] for r in results]
        ok = [r for r in runs if r["error"] is None]
        failures[m] = len(runs) - len(ok)
        raw[m] = {
            "RGA": [r["rga"] if r["error"] is None else float("nan") for r in runs],
            "AGR": [r["agr"] if r["error"] is None else float("nan") for r in runs],
        }
        indices[m] = {
            "rga_mean": _mean(raw[m]["RGA"]), "rga_sd": _sd(raw[m]["RGA"]),
            "agr_mean": _mean(raw[m]["AGR"]), "agr_sd": _sd(raw[m]["AGR"]),
        }
        if not ok:
            continue
        est = np.array([r["coef"] for r in ok], dtype=float)
        se = np.array([r["se"] for r in ok], dtype=float)
        sig = np.array([r["sig"] for r in ok], dtype=bool)
        for j, cname in enumerate(coef_names[m]):
            s = CoefSummary(
                model=m, coef=cname, est=_mean(est[:, j]), se=_mean(se[:, j]),
                reg_se=_mean(se[sig[:, j], j]) if sig[:, j].any() else None,
                mcse=_sd(est[:, j]) if len(ok) > 1 else 0.0,
                pct_sign=float(sig[:, j].mean()),
            )
            if "se_bootstrap" in ok[0]:
                s.se_bootstrap = _mean([r["se_bootstrap"][j] for r in ok])
                s.pct_sign_bootstrap = float(np.mean([r["sig_bootstrap"][j] for r in ok]))
            if "censored" in ok[0]:
                s.pct_censored = float(np.mean([r["censored"][j] for r in ok]))
            coefficients.append(s)
    raw_self = [r["self"] for r in results]
    cfg = asdict(config)
    cfg.pop("jobs")
    return SimulationSummary(cfg, list(map(float, alphas)), names, coefficients, indices,
                             _mean(raw_self), _sd(raw_self), raw, raw_self, failures)


def run_simulation(config: SimulationConfig, progress=None) -> SimulationSummary:
    """Run all iterations and aggregate.

    Each iteration seeds its own stream from ``(seed, iteration)`` so results
    do not depend on ``jobs`` or scheduling order.
    """
    alphas = resolve_alphas(config)
    tasks = [(config, alphas, it) for it in range(config.n_iter)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_iteration, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_iteration(t))
            if progress:
                progress(len(results), config.n_iter)
    return summarize(config, alphas, results)


def emit_boxplot_data(summary: SimulationSummary) -> str:
    """Long-format CSV ``model,index,iteration,value`` including the Self row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "index", "iteration", "value"])
    for index in INDICES:
        for m in summary.models:
            for it, v in enumerate(summary.raw[m][index]):
                w.writerow([m, index, it, _num(v)])
        for it, v in enumerate(summary.raw_self):
            w.writerow([SELF, index, it, _num(v)])
    return buf.getvalue()
