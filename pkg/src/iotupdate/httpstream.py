"""HTTP/1.x transactions from reassembled TCP streams, SSDP from UDP datagrams.

Bodies are kept in memory on the message (``body``) until the pipeline hands
them to an :class:`ObjectStore`, which content-addresses them on disk.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import os
import re
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .flows import DatagramGroup, FlowKey, StreamSegmentMap

log = logging.getLogger(__name__)

TCP = "TCP"
SSDP_UDP = "SSDP_UDP"

REQUEST_LINE = re.compile(rb"([A-Z][A-Z0-9_-]{0,31}) (\S+) (HTTP/\d\.\d)\r?\n")
STATUS_LINE = re.compile(rb"(HTTP/\d\.\d) (\d{3})(?: ([^\r\n]*))?\r?\n")
HEADER_END = re.compile(rb"\r?\n\r?\n")
MAX_HEAD = 64 * 1024

# Flags attached to messages / transactions.
BODY_TRUNCATED = "body_truncated"
PARSE_TRUNCATED = "http_parse_truncated"
CLOSE_FRAMED = "close_framed"
DECODE_FAILED = "decode_failed"
BODY_UNAVAILABLE = "body_unavailable"


@dataclass(frozen=True)
class ObjectRef:
    object_id: str
    path: str | None
    length: int
    content_type: str = "unknown"


@dataclass
class HttpMessage:
    start: tuple[str, ...]  # (method, uri, version) or (version, status, reason)
    headers: list[tuple[str, str]]
    body: bytes = b""
    declared_length: int | None = None
    flags: set[str] = field(default_factory=set)
    body_ref: ObjectRef | None = None
    ts: int = 0

    def header(self, name: str, default: str | None = None) -> str | None:
        name = name.lower()
        for k, v in self.headers:
            if k.lower() == name:
                return v
        return default

    @property
    def content_type(self) -> str:
        ct = self.header("content-type")
        return ct.split(";")[0].strip().lower() if ct else "unknown"

    def head_bytes(self) -> bytes:
        """Start line and header block, serialised in canonical form."""
        lines = [" ".join(self.start)] + [f"{k}: {v}" for k, v in self.headers]
        return ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1")

    def header_text(self) -> bytes:
        return "\r\n".join(f"{k}: {v}" for k, v in self.headers).encode("latin-1")


@dataclass
class HttpRequest(HttpMessage):
    @property
    def method(self) -> str:
        return self.start[0]

    @property
    def uri(self) -> str:
        return self.start[1]

    @property
    def version(self) -> str:
        return self.start[2]


@dataclass
class HttpResponse(HttpMessage):
    @property
    def version(self) -> str:
        return self.start[0]

    @property
    def status_code(self) -> int:
        return int(self.start[1])

    @property
    def reason(self) -> str:
        return self.start[2] if len(self.start) > 2 else ""


@dataclass
class HttpTransaction:
    capture_id: str
    flow: FlowKey
    transport: str
    request: HttpRequest | None = None
    response: HttpResponse | None = None

    @property
    def request_ts(self) -> int | None:
        return self.request.ts if self.request else None

    @property
    def response_ts(self) -> int | None:
        return self.response.ts if self.response else None

    @property
    def flags(self) -> set[str]:
        out: set[str] = set()
        for m in (self.request, self.response):
            if m is not None:
                out |= m.flags
        return out


class _Malformed(Exception):
    pass


def _parse_headers(block: bytes) -> list[tuple[str, str]]:
    headers: list[tuple[str, str]] = []
    for raw in re.split(rb"\r?\n", block):
        if not raw:
            continue
        if raw[:1] in (b" ", b"\t") and headers:
            name, value = headers[-1]
            headers[-1] = (name, value + " " + raw.strip().decode("latin-1"))
            continue
        name, sep, value = raw.partition(b":")
        if not sep or not name or name != name.strip():
            raise _Malformed(f"bad header line {raw[:40]!r}")
        headers.append((name.decode("latin-1"), value.strip(b" \t").decode("latin-1")))
    return headers


def _read_head(buf: bytes, pos: int, line_re: re.Pattern) -> tuple[re.Match, list[tuple[str, str]], int] | None:
    """Match a start line and header block at ``pos``. None if more bytes are needed."""
    m = line_re.match(buf, pos)
    if m is None:
        raise _Malformed("no start line")
    end = HEADER_END.search(buf, m.end() - 2)
    if end is None:
        if len(buf) - pos > MAX_HEAD:
            raise _Malformed("header block too long")
        return None
    if end.start() < m.end() - 2:
        headers: list[tuple[str, str]] = []
    else:
        headers = _parse_headers(buf[m.end():end.start()])
    return m, headers, end.end()


def _dechunk(buf: bytes, pos: int) -> tuple[bytes, int, bool]:
    """Decode a chunked body starting at ``pos``. Returns (body, end, complete)."""
    out = bytearray()
    while True:
        nl = buf.find(b"\n", pos)
        if nl < 0:
            return bytes(out), len(buf), False
        size_field = buf[pos:nl].split(b";")[0].strip()
        try:
            size = int(size_field, 16)
        except ValueError:
            raise _Malformed(f"bad chunk size {size_field[:16]!r}")
        pos = nl + 1
        if size == 0:
            # trailers end with an empty line
            while True:
                nl = buf.find(b"\n", pos)
                if nl < 0:
                    return bytes(out), len(buf), True
                line = buf[pos:nl].strip()
                pos = nl + 1
                if not line:
                    return bytes(out), pos, True
        if pos + size > len(buf):
            out += buf[pos:]
            return bytes(out), len(buf), False
        out += buf[pos:pos + size]
        pos += size
        if buf[pos:pos + 2] == b"\r\n":
            pos += 2
        elif buf[pos:pos + 1] == b"\n":
            pos += 1


def _read_body(buf: bytes, pos: int, msg: HttpMessage, until_close: bool) -> int:
    te = (msg.header("transfer-encoding") or "").lower()
    cl = msg.header("content-length")
    if "chunked" in te:
        body, pos, complete = _dechunk(buf, pos)
        msg.body = body
        if not complete:
            msg.flags.add(BODY_TRUNCATED)
        return pos
    if cl is not None:
        try:
            n = int(cl.strip())
        except ValueError:
            raise _Malformed(f"bad content-length {cl!r}")
        msg.declared_length = n
        msg.body = buf[pos:pos + n]
        if len(msg.body) < n:
            msg.flags.add(BODY_TRUNCATED)
        return pos + len(msg.body)
    if until_close:
        msg.body = buf[pos:]
        if msg.body:
            msg.flags.add(CLOSE_FRAMED)
        return len(buf)
    return pos


def _resync(buf: bytes, pos: int, line_re: re.Pattern) -> int | None:
    """Find the next plausible start line at a line boundary after ``pos``."""
    for m in re.finditer(rb"(?:^|\n)", buf[pos:]):
        at = pos + m.end()
        if line_re.match(buf, at):
            return at
    return None


def _parse_messages(stream: StreamSegmentMap | None, kind: str, methods: list[str]) -> tuple[list[HttpMessage], bool]:
    """Parse requests (kind="req") or responses (kind="resp") from a stream.

    ``methods`` is the request-method queue used to frame responses (HEAD and
    1xx/204/304 carry no body). Returns (messages, parse_truncated).
    """
    if stream is None:
        return [], False
    line_re = REQUEST_LINE if kind == "req" else STATUS_LINE
    msgs: list[HttpMessage] = []
    truncated = False
    method_idx = 0
    for offset, buf, after_gap in stream.chunks():
        pos = 0
        if after_gap and not line_re.match(buf, 0):
            nxt = _resync(buf, 0, line_re)
            if nxt is None:
                if msgs:
                    truncated = True
                continue
            pos = nxt
        while pos < len(buf):
            try:
                head = _read_head(buf, pos, line_re)
            except _Malformed:
                if msgs or after_gap:
                    truncated = True
                break
            if head is None:
                truncated = True
                break
            m, headers, body_start = head
            start = tuple(g.decode("latin-1") for g in m.groups() if g is not None)
            cls = HttpRequest if kind == "req" else HttpResponse
            msg = cls(start=start, headers=headers, ts=stream.ts_at(offset + pos))
            try:
                if kind == "req":
                    pos = _read_body(buf, body_start, msg, until_close=False)
                else:
                    status = int(start[1])
                    method = methods[method_idx] if method_idx < len(methods) else None
                    if status < 200:
                        pos = body_start
                        continue  # interim response, not a transaction
                    method_idx += 1
                    if method == "HEAD" or status in (204, 304):
                        pos = body_start
                    else:
                        pos = _read_body(buf, body_start, msg, until_close=True)
            except _Malformed:
                truncated = True
                msg.flags.add(PARSE_TRUNCATED)
                msgs.append(msg)
                break
            msgs.append(msg)
            if BODY_TRUNCATED in msg.flags:
                break
    if truncated:
        for msg in msgs[-1:]:
            msg.flags.add(PARSE_TRUNCATED)
    return msgs, truncated


def parse_http(client: StreamSegmentMap | None, server: StreamSegmentMap | None,
               capture_id: str = "") -> list[HttpTransaction]:
    """Pair requests and responses of one TCP connection, FIFO."""
    requests, _ = _parse_messages(client, "req", [])
    responses, _ = _parse_messages(server, "resp", [r.method for r in requests])
    if not requests and not responses:
        return []
    flow = (client or server).flow
    txns = []
    for i in range(max(len(requests), len(responses))):
        req = requests[i] if i < len(requests) else None
        resp = responses[i] if i < len(responses) else None
        txns.append(HttpTransaction(capture_id, flow, TCP, req, resp))
    return txns


def parse_ssdp(groups: list[DatagramGroup], capture_id: str = "") -> list[HttpTransaction]:
    """Parse each HTTP-shaped UDP datagram as a standalone message."""
    txns = []
    for group in groups:
        for pkt in group.datagrams:
            msg = parse_datagram(pkt.payload)
            if msg is None:
                continue
            msg.ts = pkt.ts
            if isinstance(msg, HttpRequest):
                txns.append(HttpTransaction(capture_id, group.flow, SSDP_UDP, request=msg))
            else:
                txns.append(HttpTransaction(capture_id, group.flow, SSDP_UDP, response=msg))
    return txns


def parse_datagram(data: bytes) -> HttpMessage | None:
    for line_re, cls in ((REQUEST_LINE, HttpRequest), (STATUS_LINE, HttpResponse)):
        m = line_re.match(data)
        if m is None:
            continue
        end = HEADER_END.search(data, m.end() - 2)
        block_end = end.start() if end else len(data)
        try:
            headers = _parse_headers(data[m.end():block_end]) if block_end > m.end() else []
        except _Malformed:
            return None
        start = tuple(g.decode("latin-1") for g in m.groups() if g is not None)
        body = data[end.end():] if end else b""
        return cls(start=start, headers=headers, body=body)
    return None


def ssdp_message_bytes(txn: HttpTransaction) -> bytes:
    msg = txn.request or txn.response
    return msg.head_bytes() + msg.body


def decode_body(msg: HttpMessage) -> tuple[bytes, bool]:
    """Undo gzip/deflate Content-Encoding. Returns (bytes, decode_failed)."""
    raw = msg.body
    enc = (msg.header("content-encoding") or "").strip().lower()
    if not raw or enc in ("", "identity"):
        return raw, False
    try:
        if enc in ("gzip", "x-gzip"):
            return gzip.decompress(raw), False
        if enc == "deflate":
            try:
                return zlib.decompress(raw), False
            except zlib.error:
                return zlib.decompress(raw, -zlib.MAX_WBITS), False
    except (OSError, EOFError, zlib.error):
        msg.flags.add(DECODE_FAILED)
        return raw, True
    return raw, False


class ObjectStore:
    """Content-addressed body store: ``<root>/objects/<hh>/<sha256>``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path_for(self, object_id: str) -> Path:
        return self.root / "objects" / object_id[:2] / object_id

    def store(self, payload: bytes, content_type: str = "unknown") -> ObjectRef:
        object_id = hashlib.sha256(payload).hexdigest()
        if not payload:
            return ObjectRef(object_id, None, 0, content_type)
        path = self.path_for(object_id)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(payload)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        return ObjectRef(object_id, f"objects/{object_id[:2]}/{object_id}", len(payload), content_type)

    def load(self, ref: ObjectRef) -> bytes:
        if ref.length == 0:
            return b""
        return self.path_for(ref.object_id).read_bytes()


def store_object(payload: bytes, out_dir: str | os.PathLike, content_type: str = "unknown") -> ObjectRef:
    return ObjectStore(out_dir).store(payload, content_type)
