"""Aggregation over a finished store: keyword matrices, cipher histograms,
downgrade estimates, per-device update design patterns and run summaries.

Output files are diff-stable: matrix rows follow the keyword corpus order,
matrix columns and device lists are sorted lexicographically, and JSON is
written with sorted keys.
"""

from __future__ import annotations

import csv
import io
import ipaddress
import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .ciphers import CLASS_ORDER, UNKNOWN, CipherCatalog, CipherClass, bucket, lookup
from .config import EVENT_CATEGORIES
from .detector import (FIRMWARE_PAYLOAD, FIRMWARE_URL, PLAINTEXT_UPDATE_KINDS, SIGNATURE_FIELD, UPDATE_SERVICE,
                       VERSION_ADVERTISEMENT)
from .store import Store, query
from .tls import TlsVersion

DEFAULT_CORPUS = ("update", "upgrade", "firmware", "software", "download")

NO_SECURITY = "NoSecurity"
OUT_OF_BAND = "OutOfBand"
FULL_TLS = "FullTls"
UNKNOWN_PATTERN = "Unknown"
PATTERNS = (NO_SECURITY, OUT_OF_BAND, FULL_TLS, UNKNOWN_PATTERN)

REPORT_FILES = ("device_matrix", "event_matrix", "cipher_histogram", "device_reports", "run_summary")
DEFAULT_FORMATS = {
    "device_matrix": "csv", "event_matrix": "csv", "cipher_histogram": "csv",
    "device_reports": "json", "run_summary": "json",
}


@dataclass
class KeywordMatrix:
    rows: list[str]
    columns: list[str]
    cells: dict[tuple[str, str], int]
    omitted: list[str] = field(default_factory=list)  # columns dropped for having no hits

    def cell(self, keyword: str, column: str) -> int:
        return self.cells.get((keyword, column), 0)

    def row_total(self, keyword: str) -> int:
        return sum(self.cell(keyword, c) for c in self.columns)

    def column_total(self, column: str) -> int:
        return sum(self.cell(k, column) for k in self.rows)

    def total(self) -> int:
        return sum(self.cells.values())


@dataclass
class DeviceReport:
    device_name: str
    keyword_totals: dict[str, int]
    event_row: dict[str, int]
    cipher_class_counts: dict[str, int]
    downgrade_vulnerable: bool
    downgrade_rationale: str
    pattern: str
    pattern_rationale: str
    versions: list[str]
    endpoints: list[str]
    flagged_capture_count: int
    capture_count: int


@dataclass
class RunSummary:
    captures_discovered: int = 0
    captures_processed: int = 0
    captures_failed: int = 0
    captures_with_http: int = 0
    captures_with_http_percent: float = 0.0
    devices: int = 0
    devices_with_http: int = 0
    flagged_captures: int = 0
    keyword_totals: dict[str, int] = field(default_factory=dict)
    devices_per_pattern: dict[str, int] = field(default_factory=dict)
    transactions: int = 0
    handshakes: int = 0
    evidence: int = 0


# -- address scope ---------------------------------------------------------

# ipaddress.is_private also covers documentation and benchmarking ranges,
# which show up as stand-ins for public hosts, so the local set is explicit.
LAN_NETWORKS = tuple(ipaddress.ip_network(n) for n in (
    "10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16", "169.254.0.0/16", "127.0.0.0/8",
    "224.0.0.0/4", "0.0.0.0/32", "255.255.255.255/32",
    "fc00::/7", "fe80::/10", "ff00::/8", "::1/128", "::/128",
))


def is_lan(addr: str) -> bool:
    """Local-scope address: RFC 1918, link-local, multicast, loopback, unspecified, ULA."""
    try:
        ip = ipaddress.ip_address(addr)
    except ValueError:
        return False
    if ip.version == 6 and ip.ipv4_mapped:
        ip = ip.ipv4_mapped
    return any(ip in net for net in LAN_NETWORKS if net.version == ip.version)


# -- matrices ----------------------------------------------------------------

def _matrix(hits, key_of, corpus, columns_all, keep_empty: bool) -> KeywordMatrix:
    cells: dict[tuple[str, str], int] = defaultdict(int)
    for h in hits:
        col = key_of(h)
        if col is None:
            continue
        cells[(h["keyword"], col)] += h["count"]
    rows = list(corpus) + sorted({k for k, _ in cells} - set(corpus))
    with_hits = {c for (_, c), v in cells.items() if v}
    if keep_empty:
        columns = sorted(set(columns_all) | with_hits)
        omitted = []
    else:
        columns = sorted(with_hits)
        omitted = sorted(set(columns_all) - with_hits)
    return KeywordMatrix(rows, columns, {k: v for k, v in cells.items() if v}, omitted)


def build_device_matrix(hits, metas, corpus=DEFAULT_CORPUS) -> KeywordMatrix:
    """Keyword x device counts. ``hits`` are rows with capture_id, keyword, count."""
    device_of = {m.capture_id: m.device_name for m in metas}
    return _matrix(hits, lambda h: device_of.get(h["capture_id"]), corpus, set(device_of.values()), False)


def build_event_matrix(hits, metas, corpus=DEFAULT_CORPUS) -> KeywordMatrix:
    """Keyword x event-category counts; columns are the categories present in ``metas``."""
    event_of = {m.capture_id: m.event_category for m in metas}
    return _matrix(hits, lambda h: event_of.get(h["capture_id"]), corpus, set(event_of.values()), True)


# -- ciphers -------------------------------------------------------------------

def empty_class_counts() -> dict[str, int]:
    return {c: 0 for c in CLASS_ORDER + [UNKNOWN]}


def class_counts(suites, catalog: CipherCatalog) -> dict[str, int]:
    counts = empty_class_counts()
    for cp in suites:
        b = bucket(catalog, cp)
        if b is not None:
            counts[b] += 1
    return counts


def cipher_histogram(handshakes_by_device: dict[str, list], catalog: CipherCatalog) -> dict[str, dict[str, int]]:
    """Per-device suite observations per class over all hellos (GREASE/SCSV excluded)."""
    out = {}
    for device in sorted(handshakes_by_device):
        counts = empty_class_counts()
        for hs in handshakes_by_device[device]:
            for cls, n in class_counts(hs.cipher_suites, catalog).items():
                counts[cls] += n
        out[device] = counts
    return out


def assess_downgrade(handshakes, catalog: CipherCatalog) -> tuple[bool, str]:
    """Vulnerable iff some pre-1.3 ClientHello offers an Insecure suite and no
    Secure or Recommended suite. An Unknown effective version counts as pre-1.3."""
    strong = (CipherClass.Secure.value, CipherClass.Recommended.value)
    clients = [h for h in handshakes if h.hello_type == "ClientHello"]
    if not clients:
        return False, "no ClientHello observed"
    for hs in sorted(clients, key=lambda h: (h.ts, h.capture_id, str(h.flow))):
        counts = class_counts(hs.cipher_suites, catalog)
        if counts[CipherClass.Insecure.value] and not any(counts[c] for c in strong) \
                and hs.effective_version < TlsVersion.TLS1_3:
            insecure = [lookup(catalog, cp).iana_name for cp in hs.cipher_suites
                        if bucket(catalog, cp) == CipherClass.Insecure.value]
            where = f"{hs.capture_id} {hs.flow}"
            return True, (f"ClientHello {where} at {hs.effective_version.name} offers "
                          f"{counts['Insecure']} insecure suite(s) ({', '.join(insecure)}) and no secure/recommended suite")
    return False, f"{len(clients)} ClientHello(s); none offers only insecure/weak suites below TLS1_3"


# -- patterns ------------------------------------------------------------------

def classify_pattern(evidence: list[dict], transactions: list[dict], handshakes: list[dict]) -> tuple[str, str]:
    """Design-pattern label and a one-line rationale for one device.

    ``evidence`` rows carry kind/transport_plaintext, ``transactions`` rows carry
    server_addr and hit_rows (number of keyword-hit rows), ``handshakes`` rows
    carry server_addr. Precedence: OutOfBand > NoSecurity > FullTls > Unknown.
    """
    kinds_plain = {e["kind"] for e in evidence if e["transport_plaintext"]}
    has_signature = any(e["kind"] == SIGNATURE_FIELD for e in evidence)
    plain_update = kinds_plain & set(PLAINTEXT_UPDATE_KINDS)
    nosec_kinds = kinds_plain & {FIRMWARE_URL, FIRMWARE_PAYLOAD, UPDATE_SERVICE}
    if plain_update and has_signature:
        return OUT_OF_BAND, f"plaintext update evidence ({', '.join(sorted(plain_update))}) with signature fields"
    if nosec_kinds and not has_signature:
        return NO_SECURITY, f"plaintext {', '.join(sorted(nosec_kinds))} evidence without signature fields"
    wan_tls = sum(1 for h in handshakes if not is_lan(h["server_addr"]))
    wan_flagged = sum(1 for t in transactions if t["hit_rows"] and not is_lan(t["server_addr"]))
    if wan_tls and not wan_flagged:
        return FULL_TLS, f"{wan_tls} TLS hello(s) to WAN hosts, no plaintext update traffic to WAN"
    if wan_flagged:
        return UNKNOWN_PATTERN, f"{wan_flagged} plaintext update-flagged WAN transaction(s) without firmware evidence"
    return UNKNOWN_PATTERN, "no update evidence and no WAN TLS"


# -- store folds ---------------------------------------------------------------

@dataclass(frozen=True)
class _Hello:
    capture_id: str
    flow: str
    hello_type: str
    effective_version: TlsVersion
    cipher_suites: tuple[int, ...]
    ts: int


def _metas(store: Store):
    from .ingest import CaptureMeta
    return [CaptureMeta(r["capture_id"], r["dataset_name"], r["region"], r["device_name"], r["experiment_label"],
                        r["event_category"], r["file_size"], r["packet_count"]) for r in query(store, "captures")]


def _hellos_by_device(store: Store) -> dict[str, list[_Hello]]:
    suites = defaultdict(list)
    for r in query(store, "suites-by-device"):
        suites[r["hs_id"]].append(r["code_point"])
    out: dict[str, list[_Hello]] = defaultdict(list)
    for r in query(store, "handshakes-by-device"):
        flow = f"{r['client_addr']}:{r['client_port']} -> {r['server_addr']}:{r['server_port']}"
        out[r["device_name"]].append(_Hello(r["capture_id"], flow, r["hello_type"],
                                            TlsVersion[r["effective_version"]], tuple(suites[r["hs_id"]]), r["ts"]))
    return out


def corpus_of(store: Store) -> tuple[str, ...]:
    value = store.info().get("keyword_corpus")
    return tuple(value.split(",")) if value else DEFAULT_CORPUS


def device_reports(store: Store, catalog: CipherCatalog) -> list[DeviceReport]:
    corpus = corpus_of(store)
    metas = _metas(store)
    hits = query(store, "hits-by-capture")
    devices = sorted({m.device_name for m in metas})
    device_of = {m.capture_id: m.device_name for m in metas}
    event_of = {m.capture_id: m.event_category for m in metas}
    hellos = _hellos_by_device(store)
    hs_rows = defaultdict(list)
    for r in query(store, "handshakes-by-device"):
        hs_rows[r["device_name"]].append(r)
    txn_rows = defaultdict(list)
    for r in query(store, "transactions-by-device"):
        txn_rows[r["device_name"]].append(r)
    ev_rows = defaultdict(list)
    for r in query(store, "evidence-by-device"):
        ev_rows[r["device_name"]].append(r)

    kw_totals = {d: {k: 0 for k in corpus} for d in devices}
    events = {d: {} for d in devices}
    flagged = defaultdict(set)
    for h in hits:
        d = device_of[h["capture_id"]]
        kw_totals[d][h["keyword"]] = kw_totals[d].get(h["keyword"], 0) + h["count"]
        e = event_of[h["capture_id"]]
        events[d][e] = events[d].get(e, 0) + h["count"]
        flagged[d].add(h["capture_id"])
    captures_per_device = defaultdict(int)
    for m in metas:
        captures_per_device[m.device_name] += 1

    hist = cipher_histogram({d: hellos.get(d, []) for d in devices}, catalog)
    reports = []
    for d in devices:
        vulnerable, why = assess_downgrade(hellos.get(d, []), catalog)
        pattern, pattern_why = classify_pattern(ev_rows[d], txn_rows[d], hs_rows[d])
        reports.append(DeviceReport(
            device_name=d,
            keyword_totals=kw_totals[d],
            event_row={e: events[d].get(e, 0) for e in EVENT_CATEGORIES},
            cipher_class_counts=hist[d],
            downgrade_vulnerable=vulnerable,
            downgrade_rationale=why,
            pattern=pattern,
            pattern_rationale=pattern_why,
            versions=sorted({e["detail"] for e in ev_rows[d] if e["kind"] == VERSION_ADVERTISEMENT}),
            endpoints=sorted({e["detail"] for e in ev_rows[d] if e["kind"] == FIRMWARE_URL}),
            flagged_capture_count=len(flagged[d]),
            capture_count=captures_per_device[d],
        ))
    return reports


def summarize_run(store: Store, catalog: CipherCatalog | None = None, reports: list[DeviceReport] | None = None) -> RunSummary:
    totals = query(store, "run-totals")[0]
    info = store.info()
    corpus = corpus_of(store)
    kw = {k: 0 for k in corpus}
    for r in query(store, "hits-by-device"):
        kw[r["keyword"]] = kw.get(r["keyword"], 0) + r["count"]
    if reports is None and catalog is not None:
        reports = device_reports(store, catalog)
    per_pattern = {p: 0 for p in PATTERNS}
    for rep in reports or []:
        per_pattern[rep.pattern] += 1
    captures = totals["captures"]
    return RunSummary(
        captures_discovered=int(info.get("captures_discovered", captures)),
        captures_processed=totals["processed"],
        captures_failed=totals["failed"],
        captures_with_http=totals["captures_with_http"],
        captures_with_http_percent=round(100.0 * totals["captures_with_http"] / captures, 2) if captures else 0.0,
        devices=len({m["device_name"] for m in query(store, "captures")}),
        devices_with_http=totals["devices_with_http"],
        flagged_captures=totals["flagged_captures"],
        keyword_totals=kw,
        devices_per_pattern=per_pattern,
        transactions=totals["transactions"],
        handshakes=totals["handshakes"],
        evidence=totals["evidence"],
    )


# -- writers -------------------------------------------------------------------

def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def matrix_csv(m: KeywordMatrix) -> str:
    return _csv_text(["keyword"] + m.columns, [[k] + [m.cell(k, c) for c in m.columns] for k in m.rows])


def matrix_json(m: KeywordMatrix) -> str:
    return _json_text({
        "rows": m.rows, "columns": m.columns, "omitted_columns": m.omitted,
        "cells": {k: {c: m.cell(k, c) for c in m.columns} for k in m.rows},
    })


def histogram_csv(hist: dict[str, dict[str, int]]) -> str:
    cols = CLASS_ORDER + [UNKNOWN]
    return _csv_text(["device"] + cols, [[d] + [hist[d][c] for c in cols] for d in sorted(hist)])


def reports_csv(reports: list[DeviceReport], corpus) -> str:
    header = (["device", "pattern", "downgrade_vulnerable", "flagged_captures", "captures"]
              + [f"kw_{k}" for k in corpus] + [f"event_{e}" for e in EVENT_CATEGORIES]
              + [f"cipher_{c}" for c in CLASS_ORDER + [UNKNOWN]] + ["versions", "endpoints"])
    rows = []
    for r in reports:
        rows.append([r.device_name, r.pattern, int(r.downgrade_vulnerable), r.flagged_capture_count, r.capture_count]
                    + [r.keyword_totals.get(k, 0) for k in corpus] + [r.event_row[e] for e in EVENT_CATEGORIES]
                    + [r.cipher_class_counts[c] for c in CLASS_ORDER + [UNKNOWN]]
                    + [" ".join(r.versions), " ".join(r.endpoints)])
    return _csv_text(header, rows)


def summary_csv(s: RunSummary) -> str:
    rows = []
    for k, v in asdict(s).items():
        if isinstance(v, dict):
            rows += [[f"{k}.{kk}", vv] for kk, vv in v.items()]
        else:
            rows.append([k, v])
    return _csv_text(["metric", "value"], rows)


def write_reports(store: Store, out_dir: str | os.PathLike, catalog: CipherCatalog, fmt: str = "all") -> list[Path]:
    """Write the five report files. ``fmt`` is csv, json, or all (each report in
    its natural format: matrices and histogram as CSV, reports and summary as JSON)."""
    if fmt not in ("csv", "json", "all"):
        raise ValueError(f"unknown format {fmt!r}")
    corpus = corpus_of(store)
    metas = _metas(store)
    hits = query(store, "hits-by-capture")
    reports = device_reports(store, catalog)
    summary = summarize_run(store, reports=reports)
    dev_m = build_device_matrix(hits, metas, corpus)
    ev_m = build_event_matrix(hits, metas, corpus)
    hist = {r.device_name: r.cipher_class_counts for r in reports}

    render = {
        "device_matrix": {"csv": lambda: matrix_csv(dev_m), "json": lambda: matrix_json(dev_m)},
        "event_matrix": {"csv": lambda: matrix_csv(ev_m), "json": lambda: matrix_json(ev_m)},
        "cipher_histogram": {"csv": lambda: histogram_csv(hist), "json": lambda: _json_text(hist)},
        "device_reports": {"csv": lambda: reports_csv(reports, corpus),
                           "json": lambda: _json_text([asdict(r) for r in reports])},
        "run_summary": {"csv": lambda: summary_csv(summary), "json": lambda: _json_text(asdict(summary))},
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in REPORT_FILES:
        kind = DEFAULT_FORMATS[name] if fmt == "all" else fmt
        path = out / f"{name}.{kind}"
        path.write_text(render[name][kind](), encoding="utf-8", newline="\n")
        written.append(path)
    return written
