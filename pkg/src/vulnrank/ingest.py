"""Parsers and join pipeline for the four vulnerability data sources.

The pipeline is offline: each source is read from an exported file and the
CVE identifier is the join key.  Files look like this:

* ``nvd``: JSON in the NVD 1.0 feed layout, ``{"CVE_Items": [...]}`` where
  each item carries ``cve.CVE_data_meta.ID`` and
  ``impact.baseMetricV2.cvssV2`` with the six CVSS v2 base labels.  A bare
  list of items is accepted too.
* ``shodan``: CSV ``cve,country,count`` with the number of exposed hosts.
* ``exploitdb``: CSV ``cve,edb_id``, one line per public exploit.
* ``tenable``: CSV ``cve,risk_factor`` with Low/Medium/High/Critical.

Fetch contract
--------------
A live fetcher only needs to write the files above.  The sources are

* NVD REST: ``https://services.nvd.nist.gov/rest/json/cve/1.0/{CVE}``,
  fields ``impact.baseMetricV2.cvssV2.{confidentialityImpact,
  integrityImpact, availabilityImpact, accessVector, accessComplexity,
  authentication}``;
* Shodan search count for the query ``vuln:{CVE} country:IT``
  (``/shodan/host/count``, field ``total``);
* ExploitDB ``files_exploits.csv``, columns ``id`` and ``codes`` (CVE ids);
* Tenable plugin pages, field ``risk_factor``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

from .datamodel import (
    ACCESS_COMPLEXITY_VALUES,
    ACCESS_VECTOR_VALUES,
    CVE_PATTERN,
    IMPACT_VALUES,
    VulnRecord,
    format_records,
    risk_factor_from_label,
)
from .errors import DataError, IngestError

log = logging.getLogger(__name__)

NVD, SHODAN, EXPLOITDB, TENABLE = "nvd", "shodan", "exploitdb", "tenable"
SOURCES = (NVD, SHODAN, EXPLOITDB, TENABLE)

FETCH_CONTRACT = {
    NVD: "https://services.nvd.nist.gov/rest/json/cve/1.0/{cve}",
    SHODAN: "https://api.shodan.io/shodan/host/count?query=vuln:{cve}+country:IT",
    EXPLOITDB: "https://gitlab.com/exploit-database/exploitdb/-/raw/main/files_exploits.csv",
    TENABLE: "https://www.tenable.com/cve/{cve}",
}

# label tables, keyed by normalised label
_IMPACT = dict(zip(("none", "partial", "complete"), IMPACT_VALUES))
_ACCESS_VECTOR = {
    "local": ACCESS_VECTOR_VALUES[0],
    "adjacent": ACCESS_VECTOR_VALUES[1],
    "adjacent network": ACCESS_VECTOR_VALUES[1],
    "local network": ACCESS_VECTOR_VALUES[1],
    "network": ACCESS_VECTOR_VALUES[2],
}
_ACCESS_COMPLEXITY = dict(zip(("high", "medium", "low"), ACCESS_COMPLEXITY_VALUES))
# CVSS v2 authentication weights; parsed for completeness, not a regressor
_AUTHENTICATION = {"multiple": 0.45, "single": 0.56, "none": 0.704}

NVD_FIELDS = (
    ("confidentiality", "confidentialityImpact", _IMPACT),
    ("integrity", "integrityImpact", _IMPACT),
    ("availability", "availabilityImpact", _IMPACT),
    ("access_vector", "accessVector", _ACCESS_VECTOR),
    ("access_complexity", "accessComplexity", _ACCESS_COMPLEXITY),
    ("authentication", "authentication", _AUTHENTICATION),
)

REASON_NO_EXPOSURE = "no exposure"
REASON_NO_VECTOR = "no cvss vector"
REASON_NO_RISK = "no risk_factor"


class NvdVector(NamedTuple):
    xc: float
    xi: float
    xa: float
    xav: float
    xac: float
    au: float


def _normalise(label):
    return " ".join(str(label).strip().lower().replace("_", " ").split())


def parse_nvd_vector(labels) -> NvdVector:
    """Quantify the six CVSS v2 base labels (C, I, A, AV, AC, Au).

    Labels are case-insensitive; NVD's ``ADJACENT_NETWORK`` style is
    accepted.  An unknown label raises ``DataError`` naming the field.
    """
    labels = tuple(labels)
    if len(labels) != len(NVD_FIELDS):
        raise DataError(f"expected {len(NVD_FIELDS)} labels, got {len(labels)}", code="unknown-label")
    values = []
    for (name, _, table), label in zip(NVD_FIELDS, labels):
        key = _normalise(label)
        if key not in table:
            raise DataError(f"unknown label: {name} ({label!r})", code="unknown-label")
        values.append(table[key])
    return NvdVector(*values)


@dataclass(frozen=True)
class SourceRecord:
    source: str
    cve_id: str
    payload: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise DataError(f"unknown source {self.source!r}")
        if not CVE_PATTERN.match(self.cve_id):
            raise DataError(f"malformed CVE id: {self.cve_id!r}")


@dataclass(frozen=True)
class Diagnostic:
    source: str
    location: str
    message: str

    def __str__(self):
        return f"{self.source}:{self.location}: {self.message}"


@dataclass
class FixtureLoad:
    """Records parsed from one file plus per-line diagnostics."""

    source: str
    records: list
    diagnostics: list

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _read_text(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}", code="unreadable") from exc


def _nvd_items(doc):
    if isinstance(doc, list):
        return doc
    if isinstance(doc, dict):
        if "CVE_Items" in doc:
            return doc["CVE_Items"]
        if "result" in doc and isinstance(doc["result"], dict):
            return doc["result"].get("CVE_Items", [])
    raise IngestError("NVD file has no CVE_Items list", code="malformed")


def _parse_nvd(text, diagnostics):
    try:
        items = _nvd_items(json.loads(text))
    except json.JSONDecodeError as exc:
        raise IngestError(f"invalid NVD JSON: {exc}", code="malformed") from exc
    records = []
    for i, item in enumerate(items):
        loc = f"item {i}"
        try:
            cve = item["cve"]["CVE_data_meta"]["ID"]
        except (KeyError, TypeError):
            diagnostics.append(Diagnostic(NVD, loc, "missing CVE id"))
            continue
        try:
            cvss = item["impact"]["baseMetricV2"]["cvssV2"]
        except (KeyError, TypeError):
            diagnostics.append(Diagnostic(NVD, loc, f"{cve}: missing CVSS v2 block"))
            continue
        try:
            labels = tuple(cvss[key] for _, key, _ in NVD_FIELDS)
        except KeyError as exc:
            diagnostics.append(Diagnostic(NVD, loc, f"{cve}: missing field {exc.args[0]}"))
            continue
        try:
            vector = parse_nvd_vector(labels)
            records.append(SourceRecord(NVD, cve, {"labels": labels, "vector": vector}))
        except DataError as exc:
            diagnostics.append(Diagnostic(NVD, loc, f"{cve}: {exc}"))
    return records


def _csv_rows(text, source, header, diagnostics):
    reader = csv.reader(io.StringIO(text))
    first = next(reader, None)
    if first is None or tuple(c.strip().lower() for c in first) != header:
        raise IngestError(f"{source} file must start with header {','.join(header)}", code="malformed")
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            diagnostics.append(Diagnostic(source, f"line {lineno}", f"expected {len(header)} fields"))
            continue
        yield lineno, [c.strip() for c in row]


def _parse_csv_source(text, source, diagnostics):
    header = {
        SHODAN: ("cve", "country", "count"),
        EXPLOITDB: ("cve", "edb_id"),
        TENABLE: ("cve", "risk_factor"),
    }[source]
    records = []
    for lineno, row in _csv_rows(text, source, header, diagnostics):
        loc = f"line {lineno}"
        try:
            if source == SHODAN:
                count = int(row[2])
                if count < 0:
                    raise DataError(f"negative count {count}")
                payload = {"country": row[1], "count": count}
            elif source == EXPLOITDB:
                if not row[1]:
                    raise DataError("empty edb_id")
                payload = {"edb_id": row[1]}
            else:
                payload = {"label": row[1], "level": risk_factor_from_label(row[1])}
            records.append(SourceRecord(source, row[0], payload))
        except (DataError, ValueError) as exc:
            diagnostics.append(Diagnostic(source, loc, str(exc)))
    return records


def load_fixture(path, source) -> FixtureLoad:
    """Parse an exported source file.

    Malformed lines or items become diagnostics; a file with no valid
    record at all raises ``IngestError``.
    """
    if source not in SOURCES:
        raise IngestError(f"unknown source {source!r}", code="unknown-source")
    text = _read_text(path)
    diagnostics = []
    if source == NVD:
        records = _parse_nvd(text, diagnostics)
    else:
        records = _parse_csv_source(text, source, diagnostics)
    if not records:
        raise IngestError(f"{path}: no valid {source} records", code="no-valid-records")
    for d in diagnostics:
        log.warning("%s", d)
    return FixtureLoad(source, records, diagnostics)


@dataclass
class JoinResult:
    records: list
    rejections: list
    warnings: list

    def dataset_csv(self):
        return format_records(self.records)

    def rejections_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cve", "reason"])
        w.writerows(self.rejections)
        return buf.getvalue()


def _index(records, source, warnings, keep="last"):
    out = OrderedDict()
    for r in records:
        if r.source != source:
            continue
        if r.cve_id in out:
            old = out[r.cve_id]
            if old.payload != r.payload:
                warnings.append(f"{source}: conflicting records for {r.cve_id}, keeping the {keep}")
            else:
                warnings.append(f"{source}: duplicate record for {r.cve_id}")
            if keep == "first":
                continue
        out[r.cve_id] = r
    return out


def join_sources(records) -> JoinResult:
    """Inner join of the four sources on the CVE id.

    A CVE yields a dataset row when it has a Shodan count, an NVD vector and
    a Tenable risk factor; the exploit flag is 1 when ExploitDB lists at
    least one exploit for it, 0 otherwise.  Every other CVE seen in any
    source is reported with the missing pieces as reason.  Rows and
    rejections are sorted by CVE id.
    """
    records = list(records)
    warnings = []
    shodan = _index(records, SHODAN, warnings)
    nvd = _index(records, NVD, warnings)
    # several plugins may rate one CVE; the first rating wins
    tenable = _index(records, TENABLE, warnings, keep="first")
    exploits = {}
    for r in records:
        if r.source == EXPLOITDB:
            exploits.setdefault(r.cve_id, set()).add(r.payload["edb_id"])

    rows, rejections = [], []
    for cve in sorted(set(shodan) | set(nvd) | set(tenable) | set(exploits)):
        missing = []
        if cve not in shodan:
            missing.append(REASON_NO_EXPOSURE)
        if cve not in nvd:
            missing.append(REASON_NO_VECTOR)
        if cve not in tenable:
            missing.append(REASON_NO_RISK)
        if missing:
            rejections.append((cve, "; ".join(missing)))
            continue
        v = nvd[cve].payload["vector"]
        rows.append(VulnRecord(
            cve_id=cve, xc=v.xc, xi=v.xi, xa=v.xa, xav=v.xav, xac=v.xac,
            exposure=shodan[cve].payload["count"],
            exploit=bool(exploits.get(cve)),
            risk_factor=tenable[cve].payload["level"],
        ))
    for w in warnings:
        log.warning("%s", w)
    return JoinResult(rows, rejections, warnings)


def ingest_files(nvd, shodan, exploitdb, tenable):
    """Load the four exported files and join them.

    Returns ``(JoinResult, diagnostics)``.
    """
    loads = [load_fixture(p, s) for p, s in
             ((nvd, NVD), (shodan, SHODAN), (exploitdb, EXPLOITDB), (tenable, TENABLE))]
    records = [r for load in loads for r in load.records]
    diagnostics = [d for load in loads for d in load.diagnostics]
    return join_sources(records), diagnostics
