"""Relational metadata store (sqlite) with a canonical, sortable text dump.

Row identifiers are derived from the capture id and the position of the row
inside that capture's bundle, so the stored content does not depend on which
worker processed a capture or in which order bundles were committed.
"""

from __future__ import annotations

import json
import logging
import os
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SCHEMA = """
CREATE TABLE captures (
    capture_id TEXT PRIMARY KEY,
    dataset_name TEXT NOT NULL,
    region TEXT NOT NULL,
    device_name TEXT NOT NULL,
    experiment_label TEXT NOT NULL,
    event_category TEXT NOT NULL,
    file_size INTEGER NOT NULL,
    packet_count INTEGER NOT NULL DEFAULT 0,
    status TEXT NOT NULL DEFAULT 'pending',
    error TEXT
);
CREATE TABLE transactions (
    txn_id TEXT PRIMARY KEY,
    capture_id TEXT NOT NULL REFERENCES captures(capture_id) ON DELETE CASCADE,
    flow_id TEXT NOT NULL,
    client_addr TEXT NOT NULL,
    client_port INTEGER NOT NULL,
    server_addr TEXT NOT NULL,
    server_port INTEGER NOT NULL,
    transport TEXT NOT NULL,
    method TEXT,
    uri TEXT,
    request_version TEXT,
    request_headers TEXT,
    request_ts INTEGER,
    request_body_id TEXT,
    request_body_length INTEGER,
    request_content_type TEXT,
    status_code INTEGER,
    reason TEXT,
    response_version TEXT,
    response_headers TEXT,
    response_ts INTEGER,
    response_body_id TEXT,
    response_body_length INTEGER,
    response_content_type TEXT,
    declared_length INTEGER,
    flags TEXT NOT NULL DEFAULT ''
);
CREATE TABLE handshakes (
    hs_id TEXT PRIMARY KEY,
    capture_id TEXT NOT NULL REFERENCES captures(capture_id) ON DELETE CASCADE,
    flow_id TEXT NOT NULL,
    client_addr TEXT NOT NULL,
    client_port INTEGER NOT NULL,
    server_addr TEXT NOT NULL,
    server_port INTEGER NOT NULL,
    hello_type TEXT NOT NULL,
    record_version TEXT NOT NULL,
    effective_version TEXT NOT NULL,
    server_name TEXT,
    ts INTEGER NOT NULL,
    incomplete INTEGER NOT NULL,
    suite_count INTEGER NOT NULL
);
CREATE TABLE handshake_suites (
    hs_id TEXT NOT NULL REFERENCES handshakes(hs_id) ON DELETE CASCADE,
    position INTEGER NOT NULL,
    code_point INTEGER NOT NULL,
    PRIMARY KEY (hs_id, position)
);
CREATE TABLE keyword_hits (
    txn_id TEXT NOT NULL REFERENCES transactions(txn_id) ON DELETE CASCADE,
    keyword TEXT NOT NULL,
    location TEXT NOT NULL,
    capture_id TEXT NOT NULL REFERENCES captures(capture_id) ON DELETE CASCADE,
    count INTEGER NOT NULL CHECK (count >= 1),
    raw_count INTEGER NOT NULL,
    PRIMARY KEY (txn_id, keyword, location)
);
CREATE TABLE evidence (
    ev_id TEXT PRIMARY KEY,
    capture_id TEXT NOT NULL REFERENCES captures(capture_id) ON DELETE CASCADE,
    device_name TEXT NOT NULL,
    kind TEXT NOT NULL,
    detail TEXT NOT NULL CHECK (detail <> ''),
    transport_plaintext INTEGER NOT NULL,
    txn_id TEXT NOT NULL REFERENCES transactions(txn_id) ON DELETE CASCADE
);
CREATE TABLE run_info (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE INDEX idx_txn_capture ON transactions(capture_id);
CREATE INDEX idx_hs_capture ON handshakes(capture_id);
CREATE INDEX idx_hits_capture ON keyword_hits(capture_id);
CREATE INDEX idx_ev_capture ON evidence(capture_id);
"""

# Table -> primary-key columns, in dump order.
TABLES = {
    "captures": ("capture_id",),
    "transactions": ("txn_id",),
    "handshakes": ("hs_id",),
    "handshake_suites": ("hs_id", "position"),
    "keyword_hits": ("txn_id", "keyword", "location"),
    "evidence": ("ev_id",),
    "run_info": ("key",),
}
CHILD_TABLES = ("keyword_hits", "evidence", "handshake_suites", "handshakes", "transactions")

QUERIES = {
    "captures": "SELECT * FROM captures ORDER BY capture_id",
    "hits-by-device": """
        SELECT c.device_name, h.keyword, SUM(h.count) AS count, SUM(h.raw_count) AS raw_count
        FROM keyword_hits h JOIN captures c USING (capture_id)
        GROUP BY c.device_name, h.keyword ORDER BY c.device_name, h.keyword""",
    "hits-by-event": """
        SELECT c.event_category, h.keyword, SUM(h.count) AS count, SUM(h.raw_count) AS raw_count
        FROM keyword_hits h JOIN captures c USING (capture_id)
        GROUP BY c.event_category, h.keyword ORDER BY c.event_category, h.keyword""",
    "hits-by-capture": """
        SELECT h.capture_id, h.txn_id, h.keyword, h.location, h.count, h.raw_count
        FROM keyword_hits h ORDER BY h.txn_id, h.keyword, h.location""",
    "suites-by-device": """
        SELECT c.device_name, s.hs_id, hs.hello_type, hs.effective_version, hs.server_addr,
               s.position, s.code_point
        FROM handshake_suites s JOIN handshakes hs USING (hs_id) JOIN captures c ON c.capture_id = hs.capture_id
        ORDER BY c.device_name, s.hs_id, s.position""",
    "handshakes-by-device": """
        SELECT c.device_name, hs.*
        FROM handshakes hs JOIN captures c USING (capture_id)
        ORDER BY c.device_name, hs.hs_id""",
    "transactions-by-device": """
        SELECT c.device_name, t.*, (SELECT COUNT(*) FROM keyword_hits h WHERE h.txn_id = t.txn_id) AS hit_rows
        FROM transactions t JOIN captures c USING (capture_id)
        ORDER BY c.device_name, t.txn_id""",
    "evidence-by-device": "SELECT * FROM evidence ORDER BY device_name, ev_id",
    "run-totals": """
        SELECT
          (SELECT COUNT(*) FROM captures) AS captures,
          (SELECT COUNT(*) FROM captures WHERE status = 'ok') AS processed,
          (SELECT COUNT(*) FROM captures WHERE status = 'failed') AS failed,
          (SELECT COUNT(DISTINCT capture_id) FROM transactions WHERE transport = 'TCP') AS captures_with_http,
          (SELECT COUNT(DISTINCT c.device_name) FROM transactions t JOIN captures c USING (capture_id)
             WHERE t.transport = 'TCP') AS devices_with_http,
          (SELECT COUNT(DISTINCT capture_id) FROM keyword_hits) AS flagged_captures,
          (SELECT COALESCE(SUM(count), 0) FROM keyword_hits) AS keyword_hits,
          (SELECT COUNT(*) FROM transactions) AS transactions,
          (SELECT COUNT(*) FROM handshakes) AS handshakes,
          (SELECT COUNT(*) FROM evidence) AS evidence""",
}


class StoreError(RuntimeError):
    pass


class MigrationRequired(StoreError):
    pass


@dataclass
class CaptureBundle:
    """Everything extracted from one capture, as store rows (dicts keyed by column)."""

    meta: object  # CaptureMeta
    status: str = "ok"
    error: str | None = None
    transactions: list[dict] = field(default_factory=list)
    handshakes: list[dict] = field(default_factory=list)  # each carries a "suites" list
    hits: list[dict] = field(default_factory=list)
    evidence: list[dict] = field(default_factory=list)


class Store:
    def __init__(self, conn: sqlite3.Connection, path: Path, mode: str):
        self.conn = conn
        self.path = path
        self.mode = mode

    def close(self) -> None:
        self.conn.close()

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ----------------------------------------------------------

    def _require_write(self) -> None:
        if self.mode != "write":
            raise StoreError("store opened read-only")

    def set_info(self, key: str, value: str) -> None:
        self._require_write()
        with self.conn:
            self.conn.execute("INSERT OR REPLACE INTO run_info(key, value) VALUES (?, ?)", (key, str(value)))

    def register_captures(self, metas) -> None:
        self._require_write()
        with self.conn:
            self.conn.executemany(
                "INSERT OR IGNORE INTO captures(capture_id, dataset_name, region, device_name,"
                " experiment_label, event_category, file_size) VALUES (?, ?, ?, ?, ?, ?, ?)",
                [(m.capture_id, m.dataset_name, m.region, m.device_name, m.experiment_label,
                  m.event_category, m.file_size) for m in metas],
            )

    def commit_capture_results(self, bundle: CaptureBundle) -> None:
        """Replace every row of one capture atomically (idempotent on retry)."""
        self._require_write()
        meta = bundle.meta
        cid = meta.capture_id
        if self.conn.execute("SELECT 1 FROM captures WHERE capture_id = ?", (cid,)).fetchone() is None:
            raise StoreError(f"capture {cid!r} is not registered")
        with self.conn:
            _delete_capture_rows(self.conn, cid)
            self.conn.execute(
                "UPDATE captures SET packet_count = ?, status = ?, error = ? WHERE capture_id = ?",
                (meta.packet_count, bundle.status, bundle.error, cid),
            )
            if bundle.error:
                self.conn.execute("INSERT OR REPLACE INTO run_info(key, value) VALUES (?, ?)",
                                  (f"capture_error:{cid}", bundle.error))
            else:
                self.conn.execute("DELETE FROM run_info WHERE key = ?", (f"capture_error:{cid}",))
            _insert_dicts(self.conn, "transactions", bundle.transactions)
            hs_rows = [{k: v for k, v in row.items() if k != "suites"} for row in bundle.handshakes]
            _insert_dicts(self.conn, "handshakes", hs_rows)
            suites = [{"hs_id": row["hs_id"], "position": i, "code_point": cp}
                      for row in bundle.handshakes for i, cp in enumerate(row["suites"])]
            _insert_dicts(self.conn, "handshake_suites", suites)
            _insert_dicts(self.conn, "keyword_hits", bundle.hits)
            _insert_dicts(self.conn, "evidence", bundle.evidence)

    def mark_failed(self, capture_id: str, error: str) -> None:
        """Record a capture-level failure; any partial rows of the capture are removed."""
        self._require_write()
        with self.conn:
            _delete_capture_rows(self.conn, capture_id)
            self.conn.execute("UPDATE captures SET status = 'failed', error = ? WHERE capture_id = ?",
                              (error, capture_id))
            self.conn.execute("INSERT OR REPLACE INTO run_info(key, value) VALUES (?, ?)",
                              (f"capture_error:{capture_id}", error))

    # -- reads -----------------------------------------------------------

    def info(self) -> dict[str, str]:
        return dict(self.conn.execute("SELECT key, value FROM run_info ORDER BY key"))

    def rows(self, sql: str, params=()) -> list[dict]:
        cur = self.conn.execute(sql, params)
        cols = [d[0] for d in cur.description]
        return [dict(zip(cols, r)) for r in cur]

    def integrity_problems(self) -> list:
        return list(self.conn.execute("PRAGMA foreign_key_check"))


def _delete_capture_rows(conn: sqlite3.Connection, capture_id: str) -> None:
    conn.execute("DELETE FROM handshake_suites WHERE hs_id IN (SELECT hs_id FROM handshakes WHERE capture_id = ?)",
                 (capture_id,))
    for table in ("keyword_hits", "evidence", "handshakes", "transactions"):
        conn.execute(f"DELETE FROM {table} WHERE capture_id = ?", (capture_id,))


def _insert_dicts(conn: sqlite3.Connection, table: str, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    sql = f"INSERT INTO {table} ({', '.join(cols)}) VALUES ({', '.join('?' * len(cols))})"
    conn.executemany(sql, [tuple(r[c] for c in cols) for r in rows])


def open_store(path: str | os.PathLike, mode: str = "read") -> Store:
    """Open (and in write mode, create) a store. Refuses foreign schema versions."""
    if mode not in ("read", "write"):
        raise ValueError(f"mode must be 'read' or 'write', not {mode!r}")
    path = Path(path)
    if mode == "read" and not path.is_file():
        raise FileNotFoundError(f"no store at {path}")
    if mode == "write":
        path.parent.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(path)
    else:
        conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    conn.execute("PRAGMA foreign_keys = ON")
    version = conn.execute("PRAGMA user_version").fetchone()[0]
    has_tables = conn.execute("SELECT COUNT(*) FROM sqlite_master WHERE type = 'table'").fetchone()[0]
    if version == 0 and not has_tables:
        if mode == "read":
            conn.close()
            raise StoreError(f"{path} is not an initialised store")
        with conn:
            conn.executescript(SCHEMA)
            conn.execute(f"PRAGMA user_version = {SCHEMA_VERSION}")
            conn.execute("INSERT INTO run_info(key, value) VALUES ('schema_version', ?)", (str(SCHEMA_VERSION),))
            conn.execute("INSERT INTO run_info(key, value) VALUES ('tool_version', ?)", (__version__,))
    elif version != SCHEMA_VERSION:
        conn.close()
        raise MigrationRequired(
            f"{path} has schema version {version}, this tool uses {SCHEMA_VERSION}; migrate or re-extract"
        )
    return Store(conn, path, mode)


def query(store: Store, name: str, params: dict | None = None) -> list[dict]:
    """Run a canned query. Optional ``device`` param filters device-keyed queries."""
    if name not in QUERIES:
        raise KeyError(f"unknown query {name!r}; known: {', '.join(sorted(QUERIES))}")
    rows = store.rows(QUERIES[name])
    params = params or {}
    if "device" in params:
        rows = [r for r in rows if r.get("device_name") == params["device"]]
    return rows


def _cell(value) -> str:
    if value is None:
        return "\\N"
    text = str(value)
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def dump_table(store: Store, table: str) -> str:
    pk = TABLES[table]
    cur = store.conn.execute(f"SELECT * FROM {table} ORDER BY {', '.join(pk)}")
    cols = [d[0] for d in cur.description]
    lines = ["\t".join(cols)]
    lines += ["\t".join(_cell(v) for v in row) for row in cur]
    return "\n".join(lines) + "\n"


def canonical_dump(store: Store, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``<table>.tsv`` per table: header row, rows sorted by primary key."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for table in TABLES:
        p = out / f"{table}.tsv"
        p.write_text(dump_table(store, table), encoding="utf-8", newline="\n")
        paths.append(p)
    return paths


def headers_json(headers: list[tuple[str, str]] | None) -> str | None:
    return None if headers is None else json.dumps([list(h) for h in headers], ensure_ascii=False)
