"""Command-line interface.

Subcommands: ``ingest``, ``fit``, ``predict``, ``rank``, ``evaluate``,
``simulate`` and ``diagnostics``.  Every command writes its tables into the
``--output`` directory and prints the written paths.  Errors are reported
on stderr as a single ``ERROR <code>: <message>`` line with exit status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import accuracy
from .datamodel import (
    Coding,
    DesignMatrix,
    apply_coding,
    build_dataset,
    encode_design,
    exposure_scaling,
    read_records,
)
from .errors import ConfigError, DataError, VulnRankError
from .ingest import ingest_files
from .midq import IDENTITY, KernelConfig, MidQuantileFit, fit_midqr, midqr_se, predict_midqr
from .ordlogit import OrderedLogitFit, expected_level, fit_ordered_logit, predict_level
from .ranklinear import (
    MIN_RANK,
    RankLinearFit,
    diagnostics_csv,
    fit_rank_linear,
    predict_rank_linear,
    residual_diagnostics,
)
from .simharness import SimulationConfig, emit_boxplot_data, run_simulation

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

DEFAULT_SEED = 20240101
MODELS = ("ordlogit", "ranklinear", "midqr")
MODEL_SETS = ("full", "technical")
EVAL_TAUS = tuple(float(t) for t in np.linspace(0.1, 0.9, 16))
GLOBAL_DEFAULTS = {"seed": DEFAULT_SEED, "config": None, "output": ".", "format": "csv",
                   "verbose": False}

log = logging.getLogger("vulnrank")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, code="usage")


# -- output helpers -----------------------------------------------------------

def _num(x):
    if x is None:
        return ""
    x = float(x)
    return repr(x) if math.isfinite(x) else "nan"


def _json_value(x):
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _table_text(header, rows, fmt):
    if fmt == "json":
        data = [{h: _json_value(v) for h, v in zip(header, row)} for row in rows]
        return json.dumps(data, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _csv_rows(text):
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


class _Writer:
    def __init__(self, outdir, fmt):
        self.outdir = Path(outdir)
        self.fmt = fmt
        self.written = []

    def text(self, name, text):
        self.outdir.mkdir(parents=True, exist_ok=True)
        path = self.outdir / name
        path.write_text(text, encoding="utf-8")
        self.written.append(path)
        return path

    def table(self, stem, header, rows):
        return self.text(f"{stem}.{self.fmt}", _table_text(header, rows, self.fmt))

    def csv_text(self, stem, text):
        """Write CSV text produced elsewhere, converting to JSON if asked."""
        if self.fmt == "csv":
            return self.text(f"{stem}.csv", text)
        header, rows = _csv_rows(text)
        return self.table(stem, header, rows)

    def json(self, name, obj):
        return self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- config ---------------------------------------------------------------------

def load_config(path):
    """Read a TOML or JSON config into a dict."""
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix.lower() == ".json":
            cfg = json.loads(raw.decode("utf-8"))
        else:
            cfg = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    return cfg


_SIM_FIELDS = {f.name for f in fields(SimulationConfig)}


def _apply_config(cfg, subparsers, command):
    """Turn config entries into defaults; explicit flags still win.

    Command options become subparser defaults.  Returns the global options
    (top level or inside the command's section), which the caller fills in
    only where no flag was given.
    """
    top = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    unknown = set(top) - set(GLOBAL_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    section = {k.replace("-", "_"): v for k, v in cfg.get(command, {}).items()}
    top.update({k: section.pop(k) for k in list(section) if k in GLOBAL_DEFAULTS})
    sub = subparsers[command]
    dests = {a.dest for a in sub._actions}
    known = {k: v for k, v in section.items() if k in dests}
    extra = {k: v for k, v in section.items() if k not in dests}
    if command == "simulate":
        bad = set(extra) - _SIM_FIELDS
    else:
        bad = set(extra)
    if bad:
        raise ConfigError(f"unknown option(s) in [{command}]: {sorted(bad)}")
    sub.set_defaults(**known, config_extra=extra)
    return top


# -- model files -----------------------------------------------------------------

def _design_to_dict(design: DesignMatrix):
    return {
        "column_names": list(design.column_names),
        "coding": [[name, c.kind, list(c.indices), None if c.levels is None else list(c.levels)]
                   for name, c in design.coding_map.items()],
    }


def _design_from_dict(d):
    coding = {}
    for name, kind, indices, levels in d["coding"]:
        lv = None if levels is None else tuple(levels)
        coding[name] = Coding(kind, tuple(indices), lv, lv[0] if lv else None)
    n = len(d["column_names"])
    return DesignMatrix(np.empty((0, n)), d["column_names"], coding, False)


def _load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        kind = doc["model"]
        cls = {"ordlogit": OrderedLogitFit, "ranklinear": RankLinearFit, "midqr": MidQuantileFit}[kind]
        return doc, cls.from_dict(doc["fit"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load model file {path}: {exc}", code="model-file") from exc


def _prepare(records, regressors, log_exposure, scaling):
    ds = build_dataset(records, regressors, log_transform=log_exposure, standardize=scaling or False)
    return ds


def _fit_model(kind, y, X, args, seed):
    if kind == "ordlogit":
        return fit_ordered_logit(y, X)
    if kind == "ranklinear":
        return fit_rank_linear(y, X, args.rank_convention)
    kernel = KernelConfig.default(*X.kernel_covariates(), discrete_bandwidth=args.discrete_bandwidth)
    fit = fit_midqr(y, X, args.tau, kernel=kernel, link=args.link, seed=seed)
    if args.se != "none":
        fit = midqr_se(fit, y, X, args.se, B=args.bootstrap_reps, seed=seed)
    return fit


def _score(kind, fit, X):
    """Ranking score and (ordlogit only) modal level."""
    if kind == "ordlogit":
        return expected_level(fit, X), predict_level(fit, X)
    if kind == "ranklinear":
        return predict_rank_linear(fit, X), None
    return predict_midqr(fit, X), None


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args, out):
    result, diagnostics = ingest_files(args.nvd, args.shodan, args.exploitdb, args.tenable)
    for d in diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not result.records:
        raise DataError("no CVE is present in all required sources", code="empty-join")
    out.text("dataset.csv", result.dataset_csv())
    out.csv_text("rejections", result.rejections_csv())


def cmd_fit(args, out):
    records = read_records(args.dataset)
    scaling = exposure_scaling(records, args.log_exposure) if args.standardize else None
    ds = _prepare(records, args.regressors, args.log_exposure, scaling)
    X = encode_design(ds)
    fit = _fit_model(args.model, ds.responses, X, args, args.seed)
    doc = {
        "model": args.model,
        "regressors": args.regressors,
        "log_exposure": args.log_exposure,
        "standardize": None if scaling is None else list(scaling),
        "design": _design_to_dict(X),
        "n_train": ds.n,
        "fit": fit.to_dict(),
    }
    out.json("model.json", doc)


def _score_dataset(args):
    doc, fit = _load_model(args.model)
    records = read_records(args.dataset, require_response=False)
    scaling = tuple(doc["standardize"]) if doc.get("standardize") else None
    ds = _prepare(records, doc["regressors"], doc["log_exposure"], scaling)
    try:
        X = apply_coding(ds, _design_from_dict(doc["design"]))
    except (KeyError, VulnRankError) as exc:
        raise DataError(f"dataset does not match the model: {exc}", code="schema-mismatch") from exc
    score, level = _score(doc["model"], fit, X)
    return doc["model"], ds.ids, score, level


def cmd_predict(args, out):
    kind, ids, score, level = _score_dataset(args)
    header = ["cve", "score"] + (["predicted_level"] if level is not None else [])
    rows = [[c, float(s)] + ([int(lv)] if level is not None else [])
            for c, s, lv in zip(ids, score, level if level is not None else [None] * len(ids))]
    out.table("predictions", header, rows)


def rank_rows(ids, score, level=None):
    """Rows ``rank,cve,score,predicted_level`` by descending score, ties by CVE id."""
    order = sorted(range(len(ids)), key=lambda i: (-float(score[i]), ids[i]))
    rows = []
    for r, i in enumerate(order, start=1):
        rows.append([r, ids[i], float(score[i]), "" if level is None else int(level[i])])
    return rows


def cmd_rank(args, out):
    kind, ids, score, level = _score_dataset(args)
    out.table("ranking", ["rank", "cve", "score", "predicted_level"], rank_rows(ids, score, level))


def _split_indices(n, n_test, seed, split):
    rng = np.random.default_rng(np.random.SeedSequence([seed, split]))
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _mean_sd(values):
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else float("nan")


def evaluate(records, args):
    """Repeated random-split evaluation of all models on both regressor sets."""
    taus = tuple(float(t) for t in args.taus)
    if any(not 0 < t < 1 for t in taus):
        raise ConfigError("quantile levels must lie strictly inside (0, 1)")
    n = len(records)
    if args.n_splits < 1 or not 0 < args.n_test < n:
        raise ConfigError(f"need n_splits >= 1 and 0 < n_test < n={n}")
    model_names = ["OrdLog", "LinReg"] + [f"MidQR({t:g})" for t in taus]
    results = {s: {m: {"rga": [], "agr": [], "failures": []} for m in model_names}
               for s in args.model_sets}
    selfs = []
    datasets = {}
    for s in args.model_sets:
        scaling = exposure_scaling(records, args.log_exposure) if args.standardize else None
        datasets[s] = build_dataset(records, s, log_transform=args.log_exposure,
                                    standardize=scaling or False)
    for split in range(args.n_splits):
        tr, te = _split_indices(n, args.n_test, args.seed, split)
        yte = None
        for s in args.model_sets:
            X = encode_design(datasets[s])
            y = datasets[s].responses
            Xtr, Xte, ytr, yte = X.take(tr), X.take(te), y[tr], y[te]
            kernel = None
            fit_seed = int(np.random.SeedSequence([args.seed, split, 1]).generate_state(1)[0])
            for m in model_names:
                try:
                    if m == "OrdLog":
                        scores = predict_level(fit_ordered_logit(ytr, Xtr), Xte)
                    elif m == "LinReg":
                        scores = predict_rank_linear(fit_rank_linear(ytr, Xtr, args.rank_convention), Xte)
                    else:
                        if kernel is None:
                            kernel = KernelConfig.default(*Xtr.kernel_covariates(),
                                                          discrete_bandwidth=args.discrete_bandwidth)
                        tau = taus[model_names.index(m) - 2]
                        fit = fit_midqr(ytr, Xtr, tau, kernel=kernel, link=args.link, seed=fit_seed)
                        scores = predict_midqr(fit, Xte)
                    results[s][m]["rga"].append(accuracy.rga(scores, yte))
                    results[s][m]["agr"].append(accuracy.agr(scores, yte))
                except (VulnRankError, np.linalg.LinAlgError) as exc:
                    results[s][m]["failures"].append(f"split {split}: {exc}")
        selfs.append(accuracy.self_reference(yte))
    return model_names, taus, results, selfs


def cmd_evaluate(args, out):
    records = read_records(args.dataset)
    model_names, taus, results, selfs = evaluate(records, args)
    self_mean, self_sd = _mean_sd(selfs)
    table = []
    report = {"n": len(records), "n_test": args.n_test, "n_splits": args.n_splits,
              "seed": args.seed, "taus": list(taus), "sets": {}}
    for s in args.model_sets:
        report["sets"][s] = {}
        for m in model_names:
            r = results[s][m]
            rga_m, rga_s = _mean_sd(r["rga"])
            agr_m, agr_s = _mean_sd(r["agr"])
            table.append([s, m, rga_m, rga_s, agr_m, agr_s, len(r["rga"]), len(r["failures"])])
            report["sets"][s][m] = {
                "rga_mean": rga_m, "rga_sd": rga_s, "agr_mean": agr_m, "agr_sd": agr_s,
                "rga": r["rga"], "agr": r["agr"], "failures": r["failures"],
            }
        table.append([s, "Self", self_mean, self_sd, self_mean, self_sd, len(selfs), 0])
    report["self"] = {"mean": self_mean, "sd": self_sd, "values": selfs}

    trend = []
    for i, t in enumerate(taus):
        for s in args.model_sets:
            d = report["sets"][s][model_names[i + 2]]
            trend.append([t, s, d["rga_mean"], d["agr_mean"]])
    ratios = []
    if set(MODEL_SETS) <= set(args.model_sets):
        full, tech = report["sets"]["full"], report["sets"]["technical"]
        for i, m in enumerate(model_names):
            tau = taus[i - 2] if i >= 2 else None
            rho_r = tech[m]["rga_mean"] / full[m]["rga_mean"] if full[m]["rga_mean"] else float("nan")
            rho_a = tech[m]["agr_mean"] / full[m]["agr_mean"] if full[m]["agr_mean"] else float("nan")
            ratios.append([m, tau, rho_r, rho_a])
        report["ratios"] = {r[0]: {"rho_rga": r[2], "rho_agr": r[3]} for r in ratios}

    out.table("evaluation", ["model_set", "model", "rga_mean", "rga_sd", "agr_mean", "agr_sd",
                             "n_ok", "n_failed"], table)
    out.table("trend", ["tau", "model_set", "rga_mean", "agr_mean"], trend)
    if ratios:
        out.table("ratios", ["model", "tau", "rho_rga", "rho_agr"], ratios)
    out.json("evaluation.json", _clean(report))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return _json_value(obj)


def cmd_simulate(args, out):
    opts = dict(getattr(args, "config_extra", None) or {})
    opts["seed"] = args.seed
    for key in ("n_iter", "k", "n_tr", "n_test", "marginal", "jobs"):
        if getattr(args, key) is not None:
            opts[key] = getattr(args, key)
    if args.taus is not None:
        opts["quantile_levels"] = tuple(args.taus)
    if args.link is not None:
        opts["midqr_link"] = args.link
    if args.se_method is not None:
        opts["midqr_se_method"] = args.se_method
    if args.clip:
        opts["midqr_clip"] = True
    config = SimulationConfig.from_mapping(opts)
    progress = None
    if args.progress:
        def progress(i, total):
            print(f"iteration {i}/{total}", file=sys.stderr)
    summary = run_simulation(config, progress=progress)
    out.json("simulation.json", summary.to_dict())
    out.csv_text("coefficients", summary.coefficient_table_csv())
    out.csv_text("indices", summary.index_table_csv())
    out.csv_text("boxplot", emit_boxplot_data(summary))


def cmd_diagnostics(args, out):
    records = read_records(args.dataset)
    ds = build_dataset(records, args.regressors, log_transform=args.log_exposure)
    y = ds.column("exposure").values if "exposure" in ds.feature_names else \
        build_dataset(records, ("exposure",), log_transform=args.log_exposure).column("exposure").values
    others = [c for c in ds.feature_names if c != "exposure"]
    if args.free or not others:
        X = np.empty((ds.n, 0))
    else:
        X = encode_design(ds.select(others))
    out.csv_text("qq", diagnostics_csv(residual_diagnostics(y, X)))


# -- parser -----------------------------------------------------------------------

def _taus(text):
    try:
        return tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad quantile list {text!r}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON config file")
    common.add_argument("--output", default=argparse.SUPPRESS, help="output directory (default .)")
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS,
                        help="table format (default csv)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="vulnrank", parents=[common],
                     description="Ordinal risk models and ranking accuracy for vulnerabilities.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        subs[name] = p
        return p

    def data_opts(p, with_model_set=True):
        p.add_argument("--dataset", required=True, help="dataset CSV")
        if with_model_set:
            p.add_argument("--regressors", choices=MODEL_SETS, default="full")
        p.add_argument("--log-exposure", action="store_true", help="use log(1 + exposure)")

    def midqr_opts(p):
        p.add_argument("--link", choices=(IDENTITY, "log"), default=IDENTITY)
        p.add_argument("--discrete-bandwidth", type=float, default=0.3)
        p.add_argument("--rank-convention", choices=(MIN_RANK, "mid"), default=MIN_RANK)

    p = add("ingest", "join exported NVD, Shodan, ExploitDB and Tenable files")
    for s in ("nvd", "shodan", "exploitdb", "tenable"):
        p.add_argument(f"--{s}", required=True, help=f"{s} export file")

    p = add("fit", "fit one model and save it as model.json")
    data_opts(p)
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--tau", type=float, default=0.5, help="quantile level for midqr")
    p.add_argument("--standardize", action="store_true", help="standardize exposure")
    p.add_argument("--se", choices=("bootstrap", "kernel", "none"), default="bootstrap",
                   help="midqr standard errors")
    p.add_argument("--bootstrap-reps", type=int, default=200)
    midqr_opts(p)

    for name, help_ in (("predict", "score a dataset with a saved model"),
                        ("rank", "prioritise CVEs by descending predicted score")):
        p = add(name, help_)
        p.add_argument("--model", required=True, help="model.json written by fit")
        p.add_argument("--dataset", required=True, help="dataset CSV (risk_factor may be empty)")

    p = add("evaluate", "repeated train/test evaluation with RGA and AGR")
    p.add_argument("--dataset", required=True)
    p.add_argument("--log-exposure", action="store_true")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--n-splits", type=int, default=10)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--taus", type=_taus, default=EVAL_TAUS,
                   help="comma-separated quantile levels (default 16 levels on [0.1, 0.9])")
    p.add_argument("--model-sets", type=lambda s: tuple(x for x in s.split(",") if x),
                   default=MODEL_SETS, help="comma-separated subset of full,technical")
    midqr_opts(p)

    p = add("simulate", "Monte Carlo comparison of the three models")
    p.add_argument("--n-iter", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--n-tr", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--marginal", choices=("uniform", "generic"), default=None)
    p.add_argument("--taus", type=_taus, default=None)
    p.add_argument("--link", choices=(IDENTITY, "log"), default=None)
    p.add_argument("--se-method", choices=("kernel", "bootstrap", "both"), default=None)
    p.add_argument("--clip", action="store_true", help="clip MidQR scores to the response range")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--progress", action="store_true")

    p = add("diagnostics", "QQ data for residuals of exposure regressed on the other regressors")
    data_opts(p)
    p.add_argument("--free", action="store_true", help="intercept-only model")

    for p in subs.values():
        p.set_defaults(config_extra={})
    return parser, subs


COMMANDS = {
    "ingest": cmd_ingest, "fit": cmd_fit, "predict": cmd_predict, "rank": cmd_rank,
    "evaluate": cmd_evaluate, "simulate": cmd_simulate, "diagnostics": cmd_diagnostics,
}


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    defaults = dict(GLOBAL_DEFAULTS)
    # global flags share their actions with every subparser, so their
    # defaults stay suppressed and are filled in here
    if getattr(args, "config", None):
        defaults.update(_apply_config(load_config(args.config), subs, args.command))
        args = parser.parse_args(argv)
    for key, value in defaults.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    if args.command == "evaluate":
        bad = set(args.model_sets) - set(MODEL_SETS)
        if bad or not args.model_sets:
            raise ConfigError(f"unknown model set(s): {sorted(bad)}")
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        out = _Writer(args.output, args.format)
        COMMANDS[args.command](args, out)
    except VulnRankError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"ERROR {exc.code}: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ERROR io: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    for path in out.written:
        print(path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
