"""Synthetic vulnerability records for tests."""

import numpy as np

from vulnrank.datamodel import (
    ACCESS_COMPLEXITY_VALUES,
    ACCESS_VECTOR_VALUES,
    IMPACT_VALUES,
    OrdinalLevel,
    VulnRecord,
)


def synthetic_records(n=200, seed=0):
    """Records whose risk factor follows a cumulative-logit model."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        xc, xi, xa = (IMPACT_VALUES[j] for j in rng.integers(0, 3, 3))
        xav = ACCESS_VECTOR_VALUES[rng.integers(0, 3)]
        xac = ACCESS_COMPLEXITY_VALUES[rng.integers(0, 3)]
        exposure = int(rng.negative_binomial(1, 0.02))
        exploit = bool(rng.random() < 0.3)
        eta = 2.5 * (xc + xi + xa) + 1.5 * xav + 0.4 * np.log1p(exposure) + 0.8 * exploit
        cum = 1 / (1 + np.exp(-(np.array([2.0, 3.2, 4.4]) - eta)))
        level = 1 + int((rng.random() > cum).sum())
        recs.append(VulnRecord(f"CVE-2020-{10000 + i}", xc, xi, xa, xav, xac, exposure, exploit,
                               OrdinalLevel(level, 4)))
    return recs
