"""Rank Graduation Accuracy (RGA) and its reverse, AGR."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateResponseError, DimensionError


INDEX_TIES = "index"
VALUE_TIES = "value"


def _concentration(ranking, values, ties=VALUE_TIES):
    ranking = np.asarray(ranking, dtype=float)
    values = np.asarray(values, dtype=float)
    if ranking.shape != values.shape or ranking.ndim != 1:
        raise DimensionError(f"length mismatch: {ranking.shape} vs {values.shape}")
    n = len(values)
    if n == 0:
        raise DimensionError("empty input")
    mean = values.mean()
    if mean == 0:
        raise DegenerateResponseError("degenerate response: mean is zero")
    if ties == VALUE_TIES:
        order = np.lexsort((np.arange(n), values, ranking))
    elif ties == INDEX_TIES:
        order = np.lexsort((np.arange(n), ranking))
    else:
        raise ValueError(f"unknown tie rule {ties!r}")
    share = np.cumsum(values[order]) / (n * mean)
    i = np.arange(1, n + 1)
    terms = (n / i) * (share - i / n) ** 2
    terms[-1] = 0.0
    return float(terms.sum())


def rga(scores_est, y_true, ties=INDEX_TIES) -> float:
    """RGA: true responses ordered by the estimated scores.

    Parameters
    ----------
    ties : {"index", "value"}
        How rows with equal scores are ordered.  The default keeps their
        original order, so the truth never decides between tied scores;
        ``"value"`` sorts them by ascending response, which rewards coarse
        scorers such as modal-level predictions.
    """
    return _concentration(scores_est, y_true, ties)


def agr(scores_est, y_true, ties=VALUE_TIES) -> float:
    """AGR: estimated scores ordered by the true responses.

    Rows with equal truth are ordered by ascending score, then position.
    Depends on ``y_true`` only through the ordering it induces.
    """
    return _concentration(y_true, scores_est, ties)


def self_reference(y_true) -> float:
    """RGA of the truth ranked by itself."""
    return _concentration(y_true, y_true)


@dataclass(frozen=True)
class AccuracyReport:
    rga: float
    agr: float
    self_value: float
    n_test: int

    def to_dict(self):
        d = asdict(self)
        d["self"] = d.pop("self_value")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self):
        return f"{self.rga!r},{self.agr!r},{self.self_value!r},{self.n_test}"


CSV_HEADER = "rga,agr,self,n_test"


def accuracy_report(scores_est, y_true) -> AccuracyReport:
    return AccuracyReport(rga(scores_est, y_true), agr(scores_est, y_true),
                          self_reference(y_true), len(np.asarray(y_true)))
