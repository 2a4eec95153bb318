"""Ordinal risk models for cyber-vulnerabilities and rank-based accuracy indices."""

from .accuracy import AccuracyReport, accuracy_report, agr, rga, self_reference
from .datamodel import (
    Dataset,
    DesignMatrix,
    OrdinalLevel,
    VulnRecord,
    build_dataset,
    encode_design,
    read_records,
)
from .errors import VulnRankError
from .midq import KernelConfig, fit_midqr, mid_cdf, mid_quantile, midqr_se, predict_midqr
from .ordlogit import fit_ordered_logit, predict_level, predict_probs
from .ranklinear import fit_rank_linear, predict_rank_linear, rank_transform

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport", "Dataset", "DesignMatrix", "KernelConfig", "OrdinalLevel", "VulnRankError",
    "VulnRecord", "accuracy_report", "agr", "build_dataset", "encode_design", "fit_midqr",
    "fit_ordered_logit", "fit_rank_linear", "mid_cdf", "mid_quantile", "midqr_se",
    "predict_level", "predict_midqr", "predict_probs", "predict_rank_linear", "rank_transform",
    "read_records", "rga", "self_reference",
]
