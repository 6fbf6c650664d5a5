import csv
import io
import json
from dataclasses import dataclass, replace

from hypothesis import given
from hypothesis import strategies as st

from iotupdate.analysis import (FULL_TLS, NO_SECURITY, OUT_OF_BAND, REPORT_FILES, UNKNOWN_PATTERN, assess_downgrade,
                                build_device_matrix, build_event_matrix, cipher_histogram, classify_pattern, is_lan,
                                matrix_csv, write_reports)
from iotupdate.ciphers import load_catalog
from iotupdate.ingest import CaptureMeta
from iotupdate.store import open_store
from iotupdate.tls import TlsVersion

CATALOG = load_catalog()
CORPUS = ("update", "upgrade", "firmware", "software", "download")
INSECURE, WEAK, SECURE, RECOMMENDED = 0x0004, 0x002F, 0xC027, 0xC02F


@dataclass(frozen=True)
class Hello:
    cipher_suites: tuple
    effective_version: TlsVersion = TlsVersion.TLS1_2
    hello_type: str = "ClientHello"
    ts: int = 0
    capture_id: str = "c"
    flow: str = "f"


def meta(i, device, event):
    return CaptureMeta(f"cap{i}", "ds", "US", device, "x", event, 1)


hit_rows = st.lists(st.tuples(st.integers(0, 5), st.sampled_from(CORPUS), st.integers(1, 20)), max_size=40)


@given(hit_rows, st.lists(st.sampled_from(["cam", "plug", "tv", "hub"]), min_size=6, max_size=6),
       st.lists(st.sampled_from(["Power", "Idle", "Other"]), min_size=6, max_size=6))
def test_matrix_marginals(rows, devices, events):
    metas = [meta(i, devices[i], events[i]) for i in range(6)]
    hits = [{"capture_id": f"cap{c}", "keyword": k, "count": n} for c, k, n in rows]
    total = sum(n for _, _, n in rows)
    dm = build_device_matrix(hits, metas, CORPUS)
    em = build_event_matrix(hits, metas, CORPUS)
    for m in (dm, em):
        assert m.total() == total
        assert sum(m.row_total(k) for k in m.rows) == total
        assert sum(m.column_total(c) for c in m.columns) == total
    for k in CORPUS:
        assert dm.row_total(k) == em.row_total(k) == sum(n for _, kw, n in rows if kw == k)
    assert set(dm.columns).isdisjoint(dm.omitted)
    assert set(dm.columns) | set(dm.omitted) == set(devices)
    assert all(dm.column_total(c) > 0 for c in dm.columns)
    assert set(em.columns) == set(events)


def test_matrix_csv_shape():
    metas = [meta(0, "cam", "Power"), meta(1, "plug", "Idle")]
    m = build_device_matrix([{"capture_id": "cap0", "keyword": "update", "count": 3}], metas, CORPUS)
    rows = list(csv.reader(io.StringIO(matrix_csv(m))))
    assert rows[0] == ["keyword", "cam"]
    assert ["update", "3"] in rows
    assert m.omitted == ["plug"]


def test_downgrade_rule_examples():
    assert assess_downgrade([Hello((INSECURE, WEAK))], CATALOG)[0]
    assert not assess_downgrade([Hello((INSECURE, RECOMMENDED))], CATALOG)[0]
    assert not assess_downgrade([Hello((INSECURE, SECURE))], CATALOG)[0]
    assert not assess_downgrade([Hello((WEAK,))], CATALOG)[0]
    assert not assess_downgrade([Hello((INSECURE,), TlsVersion.TLS1_3)], CATALOG)[0]
    assert assess_downgrade([Hello((INSECURE, 0x1A1A, 0x00FF), TlsVersion.Unknown)], CATALOG)[0]
    assert not assess_downgrade([Hello((INSECURE,), hello_type="ServerHello")], CATALOG)[0]
    ok, why = assess_downgrade([], CATALOG)
    assert not ok and "no ClientHello" in why


suite_lists = st.lists(st.sampled_from([INSECURE, 0x0005, WEAK, 0x000A, SECURE, RECOMMENDED, 0x1301, 0x0A0A, 0xFEFE]),
                       min_size=1, max_size=6).map(tuple)
versions = st.sampled_from([TlsVersion.SSL3, TlsVersion.TLS1_0, TlsVersion.TLS1_2, TlsVersion.TLS1_3,
                            TlsVersion.Unknown])
hello_lists = st.lists(st.builds(Hello, suite_lists, versions), max_size=5)


@given(hello_lists, hello_lists)
def test_downgrade_monotone_in_observations(a, b):
    if assess_downgrade(a, CATALOG)[0]:
        assert assess_downgrade(a + b, CATALOG)[0]


@given(hello_lists)
def test_downgrade_cleared_by_strong_suite_or_tls13(hellos):
    with_strong = [replace(h, cipher_suites=h.cipher_suites + (RECOMMENDED,)) for h in hellos]
    assert not assess_downgrade(with_strong, CATALOG)[0]
    tls13 = [replace(h, effective_version=TlsVersion.TLS1_3) for h in hellos]
    assert not assess_downgrade(tls13, CATALOG)[0]


def test_histogram_excludes_grease_counts_unknown():
    hist = cipher_histogram({"cam": [Hello((INSECURE, 0x0A0A, 0xFEFE, RECOMMENDED, RECOMMENDED))]}, CATALOG)
    assert hist == {"cam": {"Insecure": 1, "Weak": 0, "Secure": 0, "Recommended": 2, "Unknown": 1}}


def ev(kind, plain=1):
    return {"kind": kind, "transport_plaintext": plain}


def test_pattern_precedence():
    wan_tls = [{"server_addr": "203.0.113.5"}]
    lan_tls = [{"server_addr": "192.168.1.1"}]
    assert classify_pattern([ev("FirmwareUrl"), ev("SignatureField")], [], wan_tls)[0] == OUT_OF_BAND
    assert classify_pattern([ev("KeywordFlag"), ev("SignatureField")], [], [])[0] == OUT_OF_BAND
    assert classify_pattern([ev("FirmwarePayload")], [], wan_tls)[0] == NO_SECURITY
    assert classify_pattern([ev("UpdateService")], [], [])[0] == NO_SECURITY
    assert classify_pattern([ev("FirmwareUrl", 0)], [], wan_tls)[0] == FULL_TLS
    assert classify_pattern([], [], lan_tls)[0] == UNKNOWN_PATTERN
    flagged_wan = [{"server_addr": "203.0.113.5", "hit_rows": 2}]
    assert classify_pattern([ev("KeywordFlag")], flagged_wan, wan_tls)[0] == UNKNOWN_PATTERN
    flagged_lan = [{"server_addr": "192.168.1.9", "hit_rows": 2}]
    assert classify_pattern([ev("KeywordFlag")], flagged_lan, wan_tls)[0] == FULL_TLS
    assert classify_pattern([], [], [])[0] == UNKNOWN_PATTERN


def test_is_lan():
    assert all(is_lan(a) for a in ("10.1.2.3", "192.168.0.1", "239.255.255.250", "fe80::1", "ff02::c", "127.0.0.1"))
    assert not any(is_lan(a) for a in ("8.8.8.8", "203.0.113.5", "198.51.100.1", "2001:4860::8888", "not an ip"))
    assert is_lan("::ffff:192.168.1.1") and is_lan("fd00::5")


def test_write_reports_formats(fixture_run, tmp_path):
    out, _ = fixture_run
    with open_store(out / "store.sqlite", "read") as store:
        natural = write_reports(store, tmp_path / "all", CATALOG, "all")
        as_json = write_reports(store, tmp_path / "json", CATALOG, "json")
    assert [p.stem for p in natural] == list(REPORT_FILES)
    assert {p.suffix for p in as_json} == {".json"}
    reports = json.loads((tmp_path / "all" / "device_reports.json").read_text())
    by_dev = {r["device_name"]: r for r in reports}
    assert all(r["pattern_rationale"] and r["downgrade_rationale"] for r in reports)
    assert sum(r["capture_count"] for r in reports) == 14
    summary = json.loads((tmp_path / "all" / "run_summary.json").read_text())
    assert summary["captures_discovered"] == 14
    assert summary["devices_per_pattern"] == {p: sum(r["pattern"] == p for r in by_dev.values())
                                              for p in summary["devices_per_pattern"]}
