import csv
import json

import numpy as np
import pytest

from vulnrank.cli import DEFAULT_SEED, EVAL_TAUS, _split_indices, main, rank_rows
from vulnrank.datamodel import write_records

from synth import synthetic_records
from test_ingest import FILES


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys else ""
    return code, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "data.csv"
    write_records(synthetic_records(150, seed=1), path)
    return path


class TestRankRows:
    def test_order(self):
        rows = rank_rows(["CVE-2020-0002", "CVE-2020-0001"], [1.3, 2.9])
        assert [r[:2] for r in rows] == [[1, "CVE-2020-0001"], [2, "CVE-2020-0002"]]

    def test_ties_by_cve(self):
        rows = rank_rows(["CVE-2020-0009", "CVE-2020-0003", "CVE-2020-0005"], [2.0, 2.0, 2.0])
        assert [r[1] for r in rows] == ["CVE-2020-0003", "CVE-2020-0005", "CVE-2020-0009"]

    def test_sort_oracle(self):
        rng = np.random.default_rng(0)
        ids = [f"CVE-2020-{1000 + i}" for i in rng.permutation(60)]
        scores = rng.integers(0, 8, 60) / 2
        rows = rank_rows(ids, scores)
        # independent oracle: stable sort by id, then stable sort by descending score
        oracle = sorted(sorted(zip(ids, scores)), key=lambda t: -t[1])
        assert [(r[1], r[2]) for r in rows] == [(c, float(s)) for c, s in oracle]
        assert [r[0] for r in rows] == list(range(1, 61))


def test_split_sizes():
    for split in range(10):
        tr, te = _split_indices(714, 50, DEFAULT_SEED, split)
        assert len(tr) == 664 and len(te) == 50
        assert not set(tr) & set(te)


def test_eval_taus():
    assert len(EVAL_TAUS) == 16 and EVAL_TAUS[0] == 0.1 and EVAL_TAUS[-1] == pytest.approx(0.9)
    assert np.diff(EVAL_TAUS) == pytest.approx(np.full(15, 0.8 / 15))


class TestErrors:
    def test_usage_error(self, capsys):
        code, err = run(["fit"], capsys)
        assert code == 2 and err.startswith("ERROR usage:")
        assert len(err.strip().splitlines()) == 1

    def test_missing_dataset(self, tmp_path, capsys):
        code, err = run(["fit", "--model", "ranklinear", "--dataset", tmp_path / "nope.csv"], capsys)
        assert code == 2 and err.startswith("ERROR ")

    def test_bad_config_key(self, tmp_path, dataset, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("colour = 'red'\n")
        code, err = run(["fit", "--model", "ranklinear", "--dataset", dataset, "--config", cfg], capsys)
        assert code == 2 and err.startswith("ERROR config:")

    def test_schema_mismatch(self, tmp_path, dataset, capsys):
        out = tmp_path / "o"
        assert run(["fit", "--model", "ranklinear", "--dataset", dataset, "--output", out,
                    "--regressors", "technical"]) == (0, "")
        bad = tmp_path / "bad.csv"
        bad.write_text("cve,score\nCVE-2020-0001,1\n")
        code, err = run(["rank", "--model", out / "model.json", "--dataset", bad], capsys)
        assert code == 2 and err.startswith("ERROR ")


@pytest.mark.parametrize("model,extra", [
    ("ranklinear", []), ("ordlogit", []),
    ("midqr", ["--tau", "0.5", "--se", "kernel"]),
])
def test_fit_predict_rank(tmp_path, dataset, model, extra):
    out = tmp_path / model
    assert main(["fit", "--model", model, "--dataset", str(dataset), "--output", str(out)] + extra) == 0
    doc = json.loads((out / "model.json").read_text())
    assert doc["model"] == model and doc["n_train"] == 150
    assert main(["rank", "--model", str(out / "model.json"), "--dataset", str(dataset),
                 "--output", str(out)]) == 0
    rows = read_csv(out / "ranking.csv")
    assert len(rows) == 150 and rows[0]["rank"] == "1"
    scores = [float(r["score"]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert bool(rows[0]["predicted_level"]) == (model == "ordlogit")
    assert main(["predict", "--model", str(out / "model.json"), "--dataset", str(dataset),
                 "--output", str(out), "--format", "json"]) == 0
    preds = json.loads((out / "predictions.json").read_text())
    assert len(preds) == 150


def test_ingest_command(tmp_path):
    out = tmp_path / "ing"
    args = ["ingest", "--output", out] + sum(([f"--{s}", p] for s, p in FILES.items()), [])
    assert run(args)[0] == 0
    assert len((out / "dataset.csv").read_text().splitlines()) == 24
    assert len(read_csv(out / "rejections.csv")) == 3


def test_diagnostics_command(tmp_path, dataset):
    out = tmp_path / "d"
    assert main(["diagnostics", "--dataset", str(dataset), "--output", str(out), "--log-exposure"]) == 0
    assert len(read_csv(out / "qq.csv")) == 150


def _evaluate(dataset, out, extra=()):
    return main(["evaluate", "--dataset", str(dataset), "--output", str(out), "--n-splits", "2",
                 "--n-test", "30", "--taus", "0.3,0.7", "--seed", "5", *extra])


class TestEvaluate:
    def test_outputs_and_ratios(self, tmp_path, dataset):
        out = tmp_path / "e"
        assert _evaluate(dataset, out) == 0
        table = read_csv(out / "evaluation.csv")
        assert {r["model"] for r in table} == {"OrdLog", "LinReg", "MidQR(0.3)", "MidQR(0.7)", "Self"}
        assert {r["model_set"] for r in table} == {"full", "technical"}
        trend = read_csv(out / "trend.csv")
        assert len(trend) == 4 and list(trend[0]) == ["tau", "model_set", "rga_mean", "agr_mean"]
        ratios = read_csv(out / "ratios.csv")
        assert len(ratios) == 4
        r = {x["model"]: x for x in ratios}["LinReg"]
        e = {(x["model_set"], x["model"]): x for x in table}
        assert float(r["rho_rga"]) == pytest.approx(
            float(e["technical", "LinReg"]["rga_mean"]) / float(e["full", "LinReg"]["rga_mean"]))

    def test_determinism(self, tmp_path, dataset):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _evaluate(dataset, a, ["--n-splits", "1"]) == 0
        assert _evaluate(dataset, b, ["--n-splits", "1"]) == 0
        for name in ("evaluation.csv", "trend.csv", "ratios.csv", "evaluation.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_config_file(self, tmp_path, dataset):
        cfg = tmp_path / "c.toml"
        cfg.write_text("seed = 5\n[evaluate]\nn_splits = 1\nn_test = 30\ntaus = [0.5]\n"
                       "model_sets = ['technical']\n")
        out = tmp_path / "c"
        assert main(["evaluate", "--dataset", str(dataset), "--output", str(out),
                     "--config", str(cfg)]) == 0
        report = json.loads((out / "evaluation.json").read_text())
        assert report["n_splits"] == 1 and report["seed"] == 5 and list(report["sets"]) == ["technical"]


def _simulate(out, seed=3):
    return main(["simulate", "--output", str(out), "--seed", str(seed), "--n-iter", "2",
                 "--n-tr", "60", "--n-test", "30", "--taus", "0.5"])


def test_simulate_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _simulate(a) == 0 and _simulate(b) == 0
    for name in ("simulation.json", "coefficients.csv", "indices.csv", "boxplot.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(read_csv(a / "boxplot.csv")) == 2 * 4 * 2


def test_global_flags_after_or_before_subcommand(tmp_path, dataset):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--output", str(a), "diagnostics", "--dataset", str(dataset)]) == 0
    assert main(["diagnostics", "--dataset", str(dataset), "--output", str(b)]) == 0
    assert (a / "qq.csv").read_bytes() == (b / "qq.csv").read_bytes()


def test_explicit_flag_beats_config(tmp_path):
    from vulnrank.cli import parse_args
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 11, "simulate": {"n_iter": 3, "output": "o"}}))
    assert parse_args(["simulate", "--config", str(cfg)]).seed == 11
    assert parse_args(["--seed", "4", "simulate", "--config", str(cfg)]).seed == 4
    assert parse_args(["simulate", "--config", str(cfg), "--seed", "4"]).seed == 4
    args = parse_args(["simulate", "--config", str(cfg)])
    assert args.n_iter == 3 and args.output == "o"
