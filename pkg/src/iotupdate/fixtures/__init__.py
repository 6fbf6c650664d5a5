"""Synthetic capture scenarios and the store verifier that grades a run against them.

A scenario is a YAML document (see ``scenarios/README.md`` for the format)
with a ``script`` of flow events and a hand-written ``expect`` section. The
synthesizer turns the script into a deterministic pcap and writes a manifest
that combines the hand-written expectations with facts known by
construction: the frame count and, for every HTTP message the script built,
its start line and exact body bytes (as length and sha256).
"""

from __future__ import annotations

import gzip
import hashlib
import ipaddress
import json
import random
import zlib
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from ..packets import (IPPROTO_TCP, IPPROTO_UDP, TCP_ACK, TCP_FIN, TCP_SYN, build_ipv4_frame, tcp_segment,
                       udp_datagram, write_pcap)
from ..tls import build_client_hello, build_server_hello, wrap_records

BASE_TS = 1_560_000_000 * 1_000_000_000
STEP_NS = 1_000_000
DEFAULT_MSS = 1448
PSH = 0x08


class SynthError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    device: str
    experiment: str
    region: str
    seed: int
    hosts: dict
    script: list
    expect: dict
    description: str = ""

    @property
    def capture_id(self) -> str:
        return f"{self.region}/{self.device}/{self.experiment}/{self.name}.pcap"


def scenario_from_dict(doc: dict) -> Scenario:
    missing = {"name", "device", "experiment", "script", "expect"} - set(doc)
    if missing:
        raise SynthError(f"scenario missing keys: {sorted(missing)}")
    return Scenario(
        name=doc["name"], device=doc["device"], experiment=doc["experiment"],
        region=doc.get("region", "US"), seed=int(doc.get("seed", 0)), hosts=doc.get("hosts", {}),
        script=doc["script"] or [], expect=doc["expect"] or {}, description=doc.get("description", ""),
    )


def load_scenarios(names: list[str] | None = None) -> list[Scenario]:
    """Bundled scenarios sorted by name, optionally restricted to ``names``."""
    folder = resources.files(__name__).joinpath("scenarios")
    found = {}
    for entry in folder.iterdir():
        if entry.name.endswith(".yaml"):
            sc = scenario_from_dict(yaml.safe_load(entry.read_text("utf-8")))
            found[sc.name] = sc
    if names:
        unknown = set(names) - set(found)
        if unknown:
            raise SynthError(f"unknown scenarios: {sorted(unknown)}")
        return [found[n] for n in sorted(names)]
    return [found[n] for n in sorted(found)]


# -- payload construction ------------------------------------------------------

class _Builder:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.rng = random.Random(sc.seed)
        self.messages: list[dict] = []  # HTTP messages built, in script order

    def payload(self, spec: dict, flow: str | None = None, side: str | None = None) -> bytes:
        if not isinstance(spec, dict) or len(spec) != 1:
            raise SynthError(f"payload spec must have exactly one key: {spec!r}")
        (kind, arg), = spec.items()
        if kind == "text":
            return arg.encode("utf-8")
        if kind == "hex":
            return bytes.fromhex(arg)
        if kind == "random":
            prefix = bytes.fromhex(arg.get("prefix_hex", ""))
            return prefix + self.rng.randbytes(int(arg["size"]) - len(prefix))
        if kind == "gzip":
            return gzip.compress(self.payload(arg), mtime=0)
        if kind == "deflate":
            return zlib.compress(self.payload(arg))
        if kind == "concat":
            return b"".join(self.payload(p, flow, side) for p in arg)
        if kind == "http":
            return self.http(arg, flow, side)
        if kind == "tls_client_hello":
            hs = build_client_hello(
                [int(s) for s in arg["suites"]], legacy=int(arg.get("legacy", 0x0303)),
                server_name=arg.get("server_name"), supported_versions=arg.get("versions"),
                random=self.rng.randbytes(32), padding_to=arg.get("pad_to"),
            )
            return wrap_records(hs, split_at=arg.get("record_splits"), version=int(arg.get("record_version", 0x0301)))
        if kind == "tls_server_hello":
            hs = build_server_hello(int(arg["suite"]), legacy=int(arg.get("legacy", 0x0303)),
                                    selected_version=arg.get("version"), random=self.rng.randbytes(32))
            return wrap_records(hs, version=int(arg.get("record_version", 0x0303)))
        raise SynthError(f"unknown payload kind {kind!r}")

    def http(self, spec: dict, flow: str | None, side: str | None) -> bytes:
        start = spec["start"]
        headers = [list(h) for h in spec.get("headers", [])]
        body = self.payload(spec["body"]) if "body" in spec else b""
        framing = spec.get("framing", "length")
        if spec.get("encoding"):
            enc = spec["encoding"]
            body = gzip.compress(body, mtime=0) if enc == "gzip" else zlib.compress(body)
            headers.append(["Content-Encoding", enc])
        if framing == "length":
            headers.append(["Content-Length", str(spec.get("content_length", len(body)))])
            wire = body
        elif framing == "chunked":
            headers.append(["Transfer-Encoding", "chunked"])
            wire = b""
            pos = 0
            for size in list(spec.get("chunks", [])) + [len(body)]:
                piece = body[pos:pos + size]
                if piece:
                    wire += f"{len(piece):x}\r\n".encode() + piece + b"\r\n"
                pos += len(piece)
            wire += b"0\r\n\r\n"
        elif framing == "none":
            # no body on the wire (HEAD replies, bodiless requests); headers as given
            if "content_length" in spec:
                headers.append(["Content-Length", str(spec["content_length"])])
            body = wire = b""
        else:
            raise SynthError(f"unknown framing {framing!r}")
        head = "\r\n".join([start] + [f"{k}: {v}" for k, v in headers]) + "\r\n\r\n"
        self.messages.append({"flow": flow, "side": side, "start": start, "body": body})
        return head.encode("latin-1") + wire


def _endpoint(sc: Scenario, ref: str) -> tuple[str, int]:
    host, _, port = str(ref).rpartition(":")
    addr = sc.hosts.get(host, host)
    try:
        ipaddress.IPv4Address(addr)
    except ValueError:
        raise SynthError(f"{sc.name}: bad endpoint {ref!r}") from None
    return addr, int(port)


def _mac(addr: str) -> bytes:
    packed = ipaddress.IPv4Address(addr).packed
    if ipaddress.IPv4Address(addr).is_multicast:
        return b"\x01\x00\x5e" + bytes([packed[1] & 0x7F]) + packed[2:]
    return b"\x02\x00" + packed


def _segment_sizes(total: int, step: dict) -> list[int]:
    if "segments" in step:
        sizes = [int(s) for s in step["segments"]]
        if sum(sizes) > total:
            raise SynthError(f"segment plan {sizes} exceeds payload length {total}")
        if sum(sizes) < total:
            sizes.append(total - sum(sizes))
        return sizes
    mss = int(step.get("mss", DEFAULT_MSS))
    return [min(mss, total - off) for off in range(0, total, mss)] or []


def synth(sc: Scenario) -> tuple[bytes, dict]:
    """Deterministic pcap bytes and the expectation manifest for a scenario."""
    b = _Builder(sc)
    frames: list[tuple[int, bytes]] = []
    flows: dict[str, dict] = {}

    def emit(src, dst, proto, segment):
        frame = build_ipv4_frame(src[0], dst[0], proto, segment, ident=len(frames),
                                 src_mac=_mac(src[0]), dst_mac=_mac(dst[0]))
        frames.append((BASE_TS + len(frames) * STEP_NS, frame))

    def tcp(f, side, flags, payload=b"", seq=None):
        src, dst = (f["client"], f["server"]) if side == "client" else (f["server"], f["client"])
        other = "server" if side == "client" else "client"
        seq = f["next"][side] if seq is None else seq
        emit(src, dst, IPPROTO_TCP, tcp_segment(src[1], dst[1], seq, f["next"][other], flags, payload))

    for n, step in enumerate(sc.script):
        if not isinstance(step, dict) or len(step) != 1:
            raise SynthError(f"{sc.name}: script step {n} must have exactly one key")
        (op, arg), = step.items()
        if op == "connect":
            name = arg["flow"]
            if name in flows:
                raise SynthError(f"{sc.name}: flow {name!r} connected twice")
            f = {"client": _endpoint(sc, arg["client"]), "server": _endpoint(sc, arg["server"]),
                 "next": {"client": b.rng.getrandbits(32), "server": b.rng.getrandbits(32)}, "open": True}
            flows[name] = f
            if arg.get("handshake", True):
                tcp(f, "client", TCP_SYN)
                f["next"]["client"] += 1
                tcp(f, "server", TCP_SYN | TCP_ACK)
                f["next"]["server"] += 1
                tcp(f, "client", TCP_ACK)
        elif op == "send":
            f = flows.get(arg["flow"])
            if f is None or not f["open"]:
                raise SynthError(f"{sc.name}: send on flow {arg['flow']!r} before connect or after close")
            side = arg["from"]
            if side not in ("client", "server"):
                raise SynthError(f"{sc.name}: send 'from' must be client or server")
            data = b.payload(arg["data"], arg["flow"], side)
            sizes = _segment_sizes(len(data), arg)
            base = f["next"][side]
            segs = []
            off = 0
            for size in sizes:
                segs.append((base + off, data[off:off + size]))
                off += size
            order = arg.get("order", list(range(len(segs))))
            if sorted(order) != list(range(len(segs))):
                raise SynthError(f"{sc.name}: order {order} is not a permutation of {len(segs)} segments")
            for i in list(order) + list(arg.get("retransmit", [])):
                seq, piece = segs[i]
                tcp(f, side, TCP_ACK | PSH, piece, seq=seq)
            f["next"][side] = base + len(data)
            tcp(f, "server" if side == "client" else "client", TCP_ACK)
        elif op == "close":
            f = flows.get(arg["flow"])
            if f is None or not f["open"]:
                raise SynthError(f"{sc.name}: close of unknown or closed flow {arg['flow']!r}")
            tcp(f, "client", TCP_FIN | TCP_ACK)
            f["next"]["client"] += 1
            tcp(f, "server", TCP_FIN | TCP_ACK)
            f["next"]["server"] += 1
            tcp(f, "client", TCP_ACK)
            f["open"] = False
        elif op == "datagram":
            src, dst = _endpoint(sc, arg["src"]), _endpoint(sc, arg["dst"])
            data = b.payload(arg["data"], f"udp:{arg['src']}>{arg['dst']}", "datagram")
            emit(src, dst, IPPROTO_UDP, udp_datagram(src[1], dst[1], data))
        else:
            raise SynthError(f"{sc.name}: unknown script op {op!r}")

    pcap = write_pcap(frames)
    return pcap, build_manifest(sc, len(frames), b.messages)


def _sha(body: bytes) -> str | None:
    return hashlib.sha256(body).hexdigest() if body else None


def constructed_transactions(messages: list[dict]) -> list[list]:
    """Transactions implied by the HTTP messages the script built.

    Per TCP flow, requests and responses pair in order; each datagram message
    stands alone. Rows: transport, method, uri, status, request body length,
    response body length, request body sha256, response body sha256.
    """
    rows = []
    per_flow: dict[str, dict[str, list]] = {}
    for m in messages:
        if m["side"] == "datagram":
            parts = m["start"].split(" ", 2)
            if m["start"].startswith("HTTP/"):
                rows.append(["SSDP_UDP", None, None, int(parts[1]), None, len(m["body"]), None, _sha(m["body"])])
            else:
                rows.append(["SSDP_UDP", parts[0], parts[1], None, len(m["body"]), None, _sha(m["body"]), None])
            continue
        q = per_flow.setdefault(m["flow"], {"client": [], "server": []})
        q[m["side"]].append(m)
    for flow in per_flow.values():
        reqs, resps = flow["client"], flow["server"]
        for i in range(max(len(reqs), len(resps))):
            req = reqs[i] if i < len(reqs) else None
            resp = resps[i] if i < len(resps) else None
            row = ["TCP", None, None, None, None, None, None, None]
            if req:
                method, uri, _ = req["start"].split(" ", 2)
                row[1], row[2], row[4], row[6] = method, uri, len(req["body"]), _sha(req["body"])
            if resp:
                row[3], row[5], row[7] = int(resp["start"].split(" ", 2)[1]), len(resp["body"]), _sha(resp["body"])
            rows.append(row)
    return rows


MANIFEST_COLUMNS = {
    "transactions": ["transport", "method", "uri", "status_code", "request_body_length",
                     "response_body_length", "request_body_sha256", "response_body_sha256"],
    "keyword_hits": ["method", "uri", "status_code", "keyword", "location", "count", "raw_count"],
    "handshakes": ["hello_type", "record_version", "effective_version", "server_name", "suites", "incomplete"],
    "evidence": ["kind", "detail", "transport_plaintext", "method", "uri", "status_code"],
}


def _norm_suites(value) -> str:
    if isinstance(value, str):
        return value
    return " ".join(f"0x{int(v):04X}" for v in value)


def build_manifest(sc: Scenario, frame_count: int, messages: list[dict]) -> dict:
    exp = sc.expect
    hs = []
    for row in exp.get("handshakes", []):
        row = list(row)
        row[4] = _norm_suites(row[4])
        hs.append(row)
    return {
        "scenario": sc.name,
        "capture_id": sc.capture_id,
        "device": sc.device,
        "packet_count": frame_count,
        "pattern": exp.get("pattern", "Unknown"),
        "downgrade_vulnerable": bool(exp.get("downgrade", False)),
        "columns": MANIFEST_COLUMNS,
        "tables": {
            "transactions": constructed_transactions(messages),
            "keyword_hits": [list(r) for r in exp.get("keyword_hits", [])],
            "handshakes": hs,
            "evidence": [list(r) for r in exp.get("evidence", [])],
        },
    }


def write_corpus(scenarios: list[Scenario], out_dir, manifest_dir) -> list[Path]:
    out, mdir = Path(out_dir), Path(manifest_dir)
    mdir.mkdir(parents=True, exist_ok=True)
    written = []
    for sc in scenarios:
        pcap, manifest = synth(sc)
        path = out / sc.capture_id
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(pcap)
        mpath = mdir / f"{sc.name}.json"
        mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written += [path, mpath]
    return written


# -- verification --------------------------------------------------------------

@dataclass
class VerifyResult:
    scenario: str
    ok: bool
    diff: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.scenario}" + (f": {self.diff}" if self.diff else "")


def _norm(v):
    if isinstance(v, bool):
        return int(v)
    if v == "":
        return None
    return v


def observed_tables(store, capture_id: str) -> dict[str, list[list]]:
    """Store rows of one capture, projected onto the manifest columns."""
    conn = store.conn
    txn_rows = conn.execute(
        "SELECT txn_id, transport, method, uri, status_code, request_body_length, response_body_length,"
        " request_body_id, response_body_id FROM transactions WHERE capture_id = ?", (capture_id,)).fetchall()
    txn_key = {r[0]: (r[2], r[3], r[4]) for r in txn_rows}
    out = {"transactions": [list(r[1:]) for r in txn_rows]}
    out["keyword_hits"] = [
        list(txn_key[t]) + [kw, loc, c, rc]
        for t, kw, loc, c, rc in conn.execute(
            "SELECT txn_id, keyword, location, count, raw_count FROM keyword_hits WHERE capture_id = ?", (capture_id,))
    ]
    suites: dict[str, list[int]] = {}
    for hs_id, cp in conn.execute(
            "SELECT s.hs_id, s.code_point FROM handshake_suites s JOIN handshakes h USING (hs_id)"
            " WHERE h.capture_id = ? ORDER BY s.hs_id, s.position", (capture_id,)):
        suites.setdefault(hs_id, []).append(cp)
    out["handshakes"] = [
        [ht, rv, ev, sn, _norm_suites(suites.get(hs_id, [])), inc]
        for hs_id, ht, rv, ev, sn, inc in conn.execute(
            "SELECT hs_id, hello_type, record_version, effective_version, server_name, incomplete"
            " FROM handshakes WHERE capture_id = ?", (capture_id,))
    ]
    out["evidence"] = [
        [kind, detail, plain] + list(txn_key[t])
        for kind, detail, plain, t in conn.execute(
            "SELECT kind, detail, transport_plaintext, txn_id FROM evidence WHERE capture_id = ?", (capture_id,))
    ]
    return out


def _multiset(rows) -> Counter:
    return Counter(tuple(_norm(v) for v in r) for r in rows)


def verify(store, manifest: dict, objects_root: Path | None = None) -> VerifyResult:
    """Compare one capture's stored rows with a manifest; report the first divergence."""
    from ..analysis import device_reports
    from ..ciphers import load_catalog

    name = manifest["scenario"]
    cid = manifest["capture_id"]
    row = store.conn.execute("SELECT status, packet_count, device_name FROM captures WHERE capture_id = ?",
                             (cid,)).fetchone()
    if row is None:
        return VerifyResult(name, False, f"capture {cid} not in store")
    status, packets, device = row
    if status != "ok":
        return VerifyResult(name, False, f"capture status {status!r}")
    if packets != manifest["packet_count"]:
        return VerifyResult(name, False, f"packet_count {packets} != expected {manifest['packet_count']}")

    observed = observed_tables(store, cid)
    for table, expected_rows in manifest["tables"].items():
        cols = manifest["columns"][table]
        want, got = _multiset(expected_rows), _multiset(observed[table])
        if want != got:
            missing = sorted((want - got).elements(), key=repr)
            extra = sorted((got - want).elements(), key=repr)
            if missing:
                return VerifyResult(name, False, f"{table}: missing expected row {dict(zip(cols, missing[0]))}"
                                                 f" ({len(missing)} missing, {len(extra)} unexpected)")
            return VerifyResult(name, False, f"{table}: unexpected row {dict(zip(cols, extra[0]))}"
                                             f" ({len(extra)} unexpected)")

    if objects_root is not None:
        for r in manifest["tables"]["transactions"]:
            for digest in (r[6], r[7]):
                if digest and not (objects_root / "objects" / digest[:2] / digest).is_file():
                    return VerifyResult(name, False, f"object {digest} missing from object store")

    reports = {r.device_name: r for r in device_reports(store, load_catalog())}
    rep = reports.get(device)
    if rep is None or device != manifest["device"]:
        return VerifyResult(name, False, f"device {manifest['device']!r} not reported")
    if rep.pattern != manifest["pattern"]:
        return VerifyResult(name, False, f"pattern {rep.pattern} != expected {manifest['pattern']} ({rep.pattern_rationale})")
    if rep.downgrade_vulnerable != manifest["downgrade_vulnerable"]:
        return VerifyResult(name, False, f"downgrade_vulnerable {rep.downgrade_vulnerable} != expected "
                                         f"{manifest['downgrade_vulnerable']} ({rep.downgrade_rationale})")
    return VerifyResult(name, True)


def load_manifests(manifest_dir, names: list[str] | None = None) -> list[dict]:
    out = []
    for p in sorted(Path(manifest_dir).glob("*.json")):
        m = json.loads(p.read_text("utf-8"))
        if names and m["scenario"] not in names:
            continue
        out.append(m)
    return out


def verify_all(store_path, manifest_dir, names: list[str] | None = None) -> list[VerifyResult]:
    from ..store import open_store

    store_path = Path(store_path)
    manifests = load_manifests(manifest_dir, names)
    if names and len(manifests) != len(set(names)):
        found = {m["scenario"] for m in manifests}
        return [VerifyResult(n, False, "no manifest") for n in sorted(set(names) - found)]
    with open_store(store_path, "read") as store:
        objects_root = store_path.parent if (store_path.parent / "objects").is_dir() else None
        return [verify(store, m, objects_root) for m in manifests]
