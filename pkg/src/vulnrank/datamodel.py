"""Core data types, CVSS label encodings and design-matrix coding."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DesignError

RISK_LABELS = ("Low", "Medium", "High", "Critical")

# NIST CVSS v2 quantifications of the attack-vector components.
IMPACT_VALUES = (0.0, 0.275, 0.660)
ACCESS_VECTOR_VALUES = (0.395, 0.646, 1.0)
ACCESS_COMPLEXITY_VALUES = (0.35, 0.61, 0.71)

DATASET_FIELDS = ("cve", "xc", "xi", "xa", "xav", "xac", "exposure", "exploit", "risk_factor")

FULL_REGRESSORS = ("xc", "xi", "xa", "xav", "xac", "exposure", "exploit")
TECHNICAL_REGRESSORS = ("xav", "xac", "exposure", "exploit")

CVE_PATTERN = re.compile(r"^CVE-\d{4}-\d{4,}$")

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
BINARY = "binary"


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, order=True)
class OrdinalLevel:
    """A response level ``value`` out of ``k`` ordered levels (1-based)."""

    value: int
    k: int = field(compare=False)

    def __post_init__(self):
        if self.k < 2:
            raise DataError(f"an ordinal scale needs k >= 2 levels, got {self.k}")
        if not 1 <= self.value <= self.k:
            raise DataError(f"level {self.value} outside 1..{self.k}")

    def __int__(self):
        return self.value

    @property
    def label(self):
        if self.k == len(RISK_LABELS):
            return RISK_LABELS[self.value - 1]
        return str(self.value)


def risk_factor_from_label(label) -> OrdinalLevel:
    """Map a Tenable risk-factor label (or its integer code 1-4) to a level."""
    text = str(label).strip()
    for i, name in enumerate(RISK_LABELS, start=1):
        if text.lower() == name.lower():
            return OrdinalLevel(i, len(RISK_LABELS))
    if text.isdigit() and 1 <= int(text) <= len(RISK_LABELS):
        return OrdinalLevel(int(text), len(RISK_LABELS))
    raise DataError(f"unknown risk factor: {label!r}", code="unknown-risk-factor")


def log_exposure(n_exp) -> float:
    """Return ``log(1 + n_exp)`` for a non-negative host count."""
    if isinstance(n_exp, bool) or n_exp is None:
        raise DataError(f"invalid count: {n_exp!r}", code="invalid-count")
    value = float(n_exp)
    if not math.isfinite(value) or value < 0:
        raise DataError(f"invalid count: {n_exp!r}", code="invalid-count")
    return math.log1p(value)


def _check_enum(name, value, allowed):
    for a in allowed:
        if abs(value - a) < 1e-9:
            return a
    raise DataError(f"{name}={value!r} is not one of {allowed}", code="unknown-level")


@dataclass(frozen=True)
class VulnRecord:
    cve_id: str
    xc: float
    xi: float
    xa: float
    xav: float
    xac: float
    exposure: int
    exploit: bool
    risk_factor: OrdinalLevel | None

    def __post_init__(self):
        if not CVE_PATTERN.match(self.cve_id):
            raise DataError(f"malformed CVE id: {self.cve_id!r}")
        for name in ("xc", "xi", "xa"):
            object.__setattr__(self, name, _check_enum(name, getattr(self, name), IMPACT_VALUES))
        object.__setattr__(self, "xav", _check_enum("xav", self.xav, ACCESS_VECTOR_VALUES))
        object.__setattr__(self, "xac", _check_enum("xac", self.xac, ACCESS_COMPLEXITY_VALUES))
        if self.exposure < 0:
            raise DataError(f"invalid count: exposure={self.exposure}", code="invalid-count")

    def as_row(self):
        return {
            "cve": self.cve_id,
            "xc": _fmt(self.xc),
            "xi": _fmt(self.xi),
            "xa": _fmt(self.xa),
            "xav": _fmt(self.xav),
            "xac": _fmt(self.xac),
            "exposure": str(int(self.exposure)),
            "exploit": "1" if self.exploit else "0",
            "risk_factor": "" if self.risk_factor is None else self.risk_factor.label,
        }


def _fmt(x):
    return repr(float(x))


@dataclass(frozen=True)
class Column:
    """One covariate column.

    Categorical columns store 0-based indices into ``levels``; continuous and
    binary columns store floats.
    """

    name: str
    kind: str
    values: np.ndarray
    levels: tuple | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL, BINARY):
            raise DataError(f"unknown column kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.levels is None:
                raise DataError(f"categorical column {self.name!r} needs declared levels")
            vals = _frozen(self.values, dtype=np.int64)
        else:
            vals = _frozen(self.values, dtype=float)
        if self.kind == BINARY and not np.all((vals == 0) | (vals == 1)):
            raise DataError(f"binary column {self.name!r} must hold 0/1 values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def continuous(cls, name, values):
        return cls(name, CONTINUOUS, values)

    @classmethod
    def binary(cls, name, values):
        return cls(name, BINARY, np.asarray(values, dtype=float))

    @classmethod
    def categorical(cls, name, raw, levels=None):
        """Build from raw level values; ``levels`` defaults to sorted distinct values."""
        raw = list(raw)
        if levels is None:
            levels = sorted(set(raw))
        levels = tuple(levels)
        lookup = {lv: i for i, lv in enumerate(levels)}
        idx = []
        for v in raw:
            if v not in lookup:
                raise DataError(f"unknown level {v!r} in column {name!r}", code="unknown-level")
            idx.append(lookup[v])
        return cls(name, CATEGORICAL, np.asarray(idx, dtype=np.int64), levels)

    def __len__(self):
        return len(self.values)

    def take(self, idx):
        return Column(self.name, self.kind, self.values[idx], self.levels)


@dataclass(frozen=True)
class Dataset:
    columns: tuple
    responses: np.ndarray | None = None
    k: int | None = None
    ids: tuple | None = None

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        lengths = {len(c) for c in cols}
        if self.responses is not None:
            y = _frozen(self.responses, dtype=np.int64)
            object.__setattr__(self, "responses", y)
            lengths.add(len(y))
            k = self.k if self.k is not None else int(y.max())
            object.__setattr__(self, "k", k)
            if y.size and (y.min() < 1 or y.max() > k):
                raise DataError(f"responses must lie in 1..{k}")
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
            lengths.add(len(self.ids))
        if len(lengths) != 1:
            raise DataError(f"columns have inconsistent lengths {sorted(lengths)}")
        if lengths.pop() < 1:
            raise DataError("dataset is empty")
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names")

    @property
    def n(self):
        if self.responses is not None:
            return len(self.responses)
        return len(self.columns[0])

    @property
    def feature_names(self):
        return tuple(c.name for c in self.columns)

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def select(self, names):
        return Dataset(tuple(self.column(n) for n in names), self.responses, self.k, self.ids)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            tuple(c.take(idx) for c in self.columns),
            None if self.responses is None else self.responses[idx],
            self.k,
            None if self.ids is None else tuple(np.asarray(self.ids, dtype=object)[idx]),
        )

    def with_responses(self, y, k=None):
        return Dataset(self.columns, y, k, self.ids)


@dataclass(frozen=True)
class Coding:
    kind: str
    indices: tuple
    levels: tuple | None = None
    reference: object = None


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    column_names: tuple
    coding_map: Mapping[str, Coding]
    includes_intercept: bool

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def n_regressors(self):
        """Number of columns excluding the intercept."""
        return self.matrix.shape[1] - int(self.includes_intercept)

    def without_intercept(self):
        if not self.includes_intercept:
            return self
        coding = {
            k: Coding(c.kind, tuple(i - 1 for i in c.indices), c.levels, c.reference)
            for k, c in self.coding_map.items()
        }
        return DesignMatrix(self.matrix[:, 1:], self.column_names[1:], coding, False)

    def with_intercept(self):
        if self.includes_intercept:
            return self
        coding = {
            k: Coding(c.kind, tuple(i + 1 for i in c.indices), c.levels, c.reference)
            for k, c in self.coding_map.items()
        }
        mat = np.column_stack([np.ones(self.n), self.matrix])
        return DesignMatrix(mat, ("(Intercept)",) + self.column_names, coding, True)

    def regressors(self):
        """Matrix without the intercept column."""
        return self.matrix[:, 1:] if self.includes_intercept else self.matrix

    def decode(self, name):
        """Recover an original column (level indices for categoricals)."""
        c = self.coding_map[name]
        if c.kind != CATEGORICAL:
            return self.matrix[:, c.indices[0]].copy()
        dummies = self.matrix[:, list(c.indices)]
        hits = dummies.sum(axis=1)
        if np.any((hits != 0) & (hits != 1)):
            raise DesignError(f"dummy block for {name!r} is not a valid coding")
        return np.where(hits == 0, 0, dummies.argmax(axis=1) + 1).astype(np.int64)

    def kernel_covariates(self):
        """Split original covariates into (continuous, discrete) arrays for kernels."""
        cont, disc = [], []
        for name, c in self.coding_map.items():
            (cont if c.kind == CONTINUOUS else disc).append(self.decode(name).astype(float))
        n = self.n
        cont = np.column_stack(cont) if cont else np.empty((n, 0))
        disc = np.column_stack(disc) if disc else np.empty((n, 0))
        return cont, disc

    def take(self, idx):
        return DesignMatrix(self.matrix[idx], self.column_names, self.coding_map, self.includes_intercept)


def encode_design(dataset: Dataset, intercept=False, column_order=None) -> DesignMatrix:
    """Treatment-code a dataset: continuous/binary columns first, then dummies.

    A categorical column with ``c`` declared levels emits ``c - 1`` dummies
    with the first declared level as reference.
    """
    cols = list(dataset.columns)
    if column_order is not None:
        cols = [dataset.column(n) for n in column_order]
    numeric = [c for c in cols if c.kind != CATEGORICAL]
    factors = [c for c in cols if c.kind == CATEGORICAL]

    blocks, names, coding = [], [], {}
    if intercept:
        blocks.append(np.ones((dataset.n, 1)))
        names.append("(Intercept)")
    for c in numeric:
        coding[c.name] = Coding(c.kind, (len(names),))
        blocks.append(c.values[:, None].astype(float))
        names.append(c.name)
    for c in factors:
        n_levels = len(c.levels)
        if n_levels < 2:
            raise DesignError(f"degenerate factor {c.name!r}: a single declared level",
                              code="degenerate-factor")
        if c.values.size and (c.values.min() < 0 or c.values.max() >= n_levels):
            raise DesignError(f"unknown level in column {c.name!r}", code="unknown-level")
        dummies = (c.values[:, None] == np.arange(1, n_levels)[None, :]).astype(float)
        start = len(names)
        blocks.append(dummies)
        names.extend(f"{c.name}[{lv}]" for lv in c.levels[1:])
        coding[c.name] = Coding(CATEGORICAL, tuple(range(start, start + n_levels - 1)),
                                c.levels, c.levels[0])
    matrix = np.hstack(blocks) if blocks else np.empty((dataset.n, 0))
    return DesignMatrix(matrix, tuple(names), coding, intercept)


def apply_coding(dataset: Dataset, like: DesignMatrix) -> DesignMatrix:
    """Encode ``dataset`` with the same columns and levels as an existing design."""
    cols = []
    for name, c in like.coding_map.items():
        col = dataset.column(name)
        if c.kind == CATEGORICAL:
            if col.kind != CATEGORICAL:
                raise DesignError(f"column {name!r} is not categorical")
            raw = [col.levels[i] for i in col.values]
            col = Column.categorical(name, raw, c.levels)
        cols.append(col)
    design = encode_design(Dataset(tuple(cols)), intercept=like.includes_intercept)
    if design.column_names != like.column_names:
        raise DesignError("design columns do not match the fitted model")
    return design


# -- CSV schema -------------------------------------------------------------

def parse_dataset_row(row: Mapping[str, str], require_response=True) -> VulnRecord:
    """Parse one dataset CSV row.

    With ``require_response=False`` an empty ``risk_factor`` is allowed, as
    for candidate vulnerabilities that have not been rated yet.
    """
    optional = () if require_response else ("risk_factor",)
    missing = [f for f in DATASET_FIELDS
               if f not in optional and (row.get(f) is None or str(row.get(f)).strip() == "")]
    if missing:
        raise DataError(f"missing field(s): {', '.join(missing)}", code="missing-field")
    try:
        exposure = int(str(row["exposure"]).strip())
        exploit = str(row["exploit"]).strip()
        if exploit not in ("0", "1"):
            raise DataError(f"exploit must be 0 or 1, got {exploit!r}")
        return VulnRecord(
            cve_id=row["cve"].strip(),
            xc=float(row["xc"]),
            xi=float(row["xi"]),
            xa=float(row["xa"]),
            xav=float(row["xav"]),
            xac=float(row["xac"]),
            exposure=exposure,
            exploit=exploit == "1",
            risk_factor=(risk_factor_from_label(row["risk_factor"])
                         if (row.get("risk_factor") or "").strip() else None),
        )
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed numeric field: {exc}") from exc


def read_records(path, require_response=True) -> list[VulnRecord]:
    """Read the dataset CSV; any malformed row is an error."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != DATASET_FIELDS:
        raise DataError(f"dataset header must be {','.join(DATASET_FIELDS)}", code="schema")
    records = []
    for lineno, row in enumerate(reader, start=2):
        try:
            records.append(parse_dataset_row(row, require_response))
        except DataError as exc:
            raise DataError(f"line {lineno}: {exc}", code=exc.code) from exc
    if not records:
        raise DataError("dataset has no rows")
    return records


def format_records(records: Iterable[VulnRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=DATASET_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(r.as_row())
    return buf.getvalue()


def write_records(records: Iterable[VulnRecord], path):
    Path(path).write_text(format_records(records), encoding="utf-8")


def exposure_scaling(records: Sequence[VulnRecord], log_transform=False):
    """Mean and SD (ddof=1) of the exposure column, after the optional log."""
    x = np.array([r.exposure for r in records], dtype=float)
    if log_transform:
        x = np.log1p(x)
    sd = x.std(ddof=1) if len(x) > 1 else 0.0
    return float(x.mean()), float(sd if sd > 0 else 1.0)


def build_dataset(records: Sequence[VulnRecord], regressors=FULL_REGRESSORS,
                  log_transform=False, standardize=False) -> Dataset:
    """Assemble a modelling dataset from records.

    Attack-vector components become categorical columns over their observed
    levels, exposure is continuous (optionally ``log1p`` and/or standardized)
    and exploit is binary.  ``standardize`` may be ``True`` (use the records'
    own mean and SD) or a ``(mean, sd)`` pair saved from a training set.
    Responses are left unset when any record lacks a risk factor.
    """
    if not records:
        raise DataError("no records")
    if isinstance(regressors, str):
        regressors = {"full": FULL_REGRESSORS, "technical": TECHNICAL_REGRESSORS}[regressors]
    cols = []
    for name in regressors:
        if name in ("xc", "xi", "xa", "xav", "xac"):
            cols.append(Column.categorical(name, [getattr(r, name) for r in records]))
        elif name == "exposure":
            x = np.array([r.exposure for r in records], dtype=float)
            if log_transform:
                x = np.log1p(x)
            if standardize is True:
                standardize = exposure_scaling(records, log_transform)
            if standardize:
                x = (x - standardize[0]) / standardize[1]
            cols.append(Column.continuous(name, x))
        elif name == "exploit":
            cols.append(Column.binary(name, [float(r.exploit) for r in records]))
        else:
            raise DataError(f"unknown regressor {name!r}")
    ids = tuple(r.cve_id for r in records)
    if any(r.risk_factor is None for r in records):
        return Dataset(tuple(cols), None, len(RISK_LABELS), ids)
    y = np.array([r.risk_factor.value for r in records], dtype=np.int64)
    return Dataset(tuple(cols), y, len(RISK_LABELS), ids)
