import csv
import io
import itertools
import json
from pathlib import Path

import pytest

from vulnrank.datamodel import OrdinalLevel, read_records
from vulnrank.errors import DataError, IngestError
from vulnrank.ingest import (
    EXPLOITDB,
    NVD,
    SHODAN,
    TENABLE,
    SourceRecord,
    ingest_files,
    join_sources,
    load_fixture,
    parse_nvd_vector,
)

FIXTURES = Path(__file__).parent / "fixtures" / "ingest"
FILES = {s: FIXTURES / f for s, f in
         ((NVD, "nvd.json"), (SHODAN, "shodan.csv"), (EXPLOITDB, "exploitdb.csv"),
          (TENABLE, "tenable.csv"))}

IMPACT = {"none": 0.0, "partial": 0.275, "complete": 0.660}
ACCESS_VECTOR = {"local": 0.395, "adjacent_network": 0.646, "network": 1.0}
ACCESS_COMPLEXITY = {"high": 0.35, "medium": 0.61, "low": 0.71}


# -- label mapping, every combination of the five quantified fields ---------

@pytest.mark.parametrize("c,i,a", list(itertools.product(IMPACT, repeat=3)))
def test_impact_labels(c, i, a):
    v = parse_nvd_vector((c, i, a, "network", "low", "none"))
    assert (v.xc, v.xi, v.xa) == (IMPACT[c], IMPACT[i], IMPACT[a])


@pytest.mark.parametrize("av,ac", list(itertools.product(ACCESS_VECTOR, ACCESS_COMPLEXITY)))
def test_access_labels(av, ac):
    v = parse_nvd_vector(("none", "none", "none", av, ac, "none"))
    assert (v.xav, v.xac) == (ACCESS_VECTOR[av], ACCESS_COMPLEXITY[ac])


@pytest.mark.parametrize("label", ["COMPLETE", "Complete", " complete "])
def test_case_and_spacing(label):
    assert parse_nvd_vector((label, "none", "none", "NETWORK", "LOW", "NONE")).xc == 0.660


@pytest.mark.parametrize("alias", ["ADJACENT_NETWORK", "adjacent network", "local network"])
def test_adjacent_aliases(alias):
    assert parse_nvd_vector(("none",) * 3 + (alias, "low", "none")).xav == 0.646


def test_examples():
    v = parse_nvd_vector(("complete", "complete", "complete", "network", "low", "none"))
    assert v[:5] == (0.660, 0.660, 0.660, 1.0, 0.71)
    v = parse_nvd_vector(("none", "none", "none", "local", "high", "none"))
    assert v[:5] == (0.0, 0.0, 0.0, 0.395, 0.35)


@pytest.mark.parametrize("pos,field", [(0, "confidentiality"), (3, "access_vector"),
                                       (4, "access_complexity"), (5, "authentication")])
def test_unknown_label_names_field(pos, field):
    labels = ["none", "none", "none", "local", "high", "none"]
    labels[pos] = "total"
    with pytest.raises(DataError, match=f"unknown label: {field}"):
        parse_nvd_vector(labels)


# -- loading -----------------------------------------------------------------

def test_three_line_shodan(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("cve,country,count\nCVE-2020-0001,IT,3\nCVE-2020-0002,IT,0\nCVE-2020-0003,IT,9\n")
    load = load_fixture(p, SHODAN)
    assert len(load) == 3 and not load.diagnostics


def test_mixed_lines_counted(tmp_path):
    p = tmp_path / "t.csv"
    rows = ["CVE-2020-0001,Low", "CVE-2020-0002,High", "CVE-BAD,High", "CVE-2020-0003,Medium",
            "CVE-2020-0004,Severe", "CVE-2020-0005,Critical", "CVE-2020-0006,low"]
    p.write_text("cve,risk_factor\n" + "\n".join(rows) + "\n")
    load = load_fixture(p, TENABLE)
    assert len(load.records) == 5 and len(load.diagnostics) == 2


def test_nvd_missing_cvss_is_diagnosed():
    load = load_fixture(FILES[NVD], NVD)
    assert any("missing CVSS" in d.message for d in load.diagnostics)


def test_nvd_bare_list(tmp_path):
    items = json.loads(FILES[NVD].read_text())["CVE_Items"]
    p = tmp_path / "n.json"
    p.write_text(json.dumps(items))
    assert len(load_fixture(p, NVD)) == len(load_fixture(FILES[NVD], NVD))


@pytest.mark.parametrize("content,code", [
    ("nope", "malformed"), ("cve,country,count\nCVE-BAD,IT,1\n", "no-valid-records"),
])
def test_load_errors(tmp_path, content, code):
    p = tmp_path / "x.csv"
    p.write_text(content)
    with pytest.raises(IngestError) as exc:
        load_fixture(p, SHODAN)
    assert exc.value.code == code


def test_unreadable(tmp_path):
    with pytest.raises(IngestError) as exc:
        load_fixture(tmp_path / "missing.csv", SHODAN)
    assert exc.value.code == "unreadable"


# -- join ----------------------------------------------------------------------

def _full(cve, count=5, level=3, exploit=True):
    recs = [
        SourceRecord(NVD, cve, {"vector": parse_nvd_vector(("partial",) * 3 + ("network", "low", "none"))}),
        SourceRecord(SHODAN, cve, {"country": "IT", "count": count}),
        SourceRecord(TENABLE, cve, {"label": "x", "level": OrdinalLevel(level, 4)}),
    ]
    if exploit:
        recs.append(SourceRecord(EXPLOITDB, cve, {"edb_id": "1"}))
    return recs


def test_one_cve_in_all_sources():
    res = join_sources(_full("CVE-2020-0001"))
    assert len(res.records) == 1 and not res.rejections
    assert res.records[0].exploit and res.records[0].exposure == 5


def test_missing_tenable():
    recs = [r for r in _full("CVE-2020-0001") if r.source != TENABLE]
    assert join_sources(recs).rejections == [("CVE-2020-0001", "no risk_factor")]


def test_missing_shodan_counting():
    recs = _full("CVE-2020-0001") + _full("CVE-2020-0002", exploit=False)
    recs += [r for r in _full("CVE-2020-0003") if r.source != SHODAN]
    res = join_sources(recs)
    assert len(res.records) == 2 and len(res.rejections) == 1
    assert res.rejections[0] == ("CVE-2020-0003", "no exposure")
    assert not res.records[1].exploit


def test_join_is_order_independent():
    recs = _full("CVE-2020-0002") + _full("CVE-2020-0001")
    assert join_sources(recs).dataset_csv() == join_sources(recs[::-1]).dataset_csv()


class TestFixtureSet:
    def test_counts(self):
        res, diags = ingest_files(*FILES.values())
        cves = {r.cve_id for r in res.records} | {c for c, _ in res.rejections}
        assert len(cves) >= 20
        assert len(res.records) == 23 and len(res.rejections) == 3
        assert dict(res.rejections) == {
            "CVE-2020-1814": "no risk_factor",
            "CVE-2021-1851": "no exposure",
            "CVE-2022-1888": "no cvss vector",
        }
        assert diags  # bad id, unknown labels, missing CVSS block
        assert any("duplicate" in w or "conflicting" in w for w in res.warnings)

    def test_counting_invariant(self):
        # dataset rows = CVEs with a Shodan count minus the ones rejected for other reasons
        res, _ = ingest_files(*FILES.values())
        shodan = {r.cve_id for r in load_fixture(FILES[SHODAN], SHODAN)}
        rejected = {c for c, reason in res.rejections if "no exposure" not in reason}
        assert len(res.records) == len(shodan - rejected)

    def test_round_trip_byte_identical(self, tmp_path):
        res, _ = ingest_files(*FILES.values())
        text = res.dataset_csv()
        p = tmp_path / "dataset.csv"
        p.write_text(text)
        again = read_records(p)
        assert again == res.records
        p2 = tmp_path / "again.csv"
        from vulnrank.datamodel import write_records
        write_records(again, p2)
        assert p2.read_bytes() == p.read_bytes()

    def test_idempotent(self):
        a, _ = ingest_files(*FILES.values())
        b, _ = ingest_files(*FILES.values())
        assert a.dataset_csv() == b.dataset_csv() and a.rejections_csv() == b.rejections_csv()

    def test_rejections_csv(self):
        res, _ = ingest_files(*FILES.values())
        rows = list(csv.reader(io.StringIO(res.rejections_csv())))
        assert rows[0] == ["cve", "reason"] and len(rows) == 4
