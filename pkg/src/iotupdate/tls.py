"""ClientHello / ServerHello extraction from reassembled TCP streams."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .flows import C2S, FlowKey, StreamSegmentMap

CONTENT_CCS = 20
CONTENT_HANDSHAKE = 22
HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2
EXT_SERVER_NAME = 0
EXT_SUPPORTED_VERSIONS = 43
MAX_RECORD = (1 << 14) + 2048

HELLO_RETRY_RANDOM = bytes.fromhex("cf21ad74e59a6111be1d8c021e65b891c2a211167abb8c5e079e09e2c8a8339c")


class TlsVersion(enum.IntEnum):
    Unknown = 0
    SSL3 = 0x0300
    TLS1_0 = 0x0301
    TLS1_1 = 0x0302
    TLS1_2 = 0x0303
    TLS1_3 = 0x0304

    @classmethod
    def from_code(cls, code: int) -> "TlsVersion":
        try:
            return cls(code)
        except ValueError:
            return cls.Unknown


def is_grease(code: int) -> bool:
    """Reserved GREASE values: 0x0A0A, 0x1A1A, ... 0xFAFA."""
    return (code & 0x0F0F) == 0x0A0A and (code >> 8) == (code & 0xFF)


@dataclass(frozen=True)
class TlsHandshake:
    capture_id: str
    flow: FlowKey
    hello_type: str  # "ClientHello" | "ServerHello"
    record_version: TlsVersion
    effective_version: TlsVersion
    cipher_suites: tuple[int, ...]
    server_name: str | None
    ts: int
    incomplete: bool = False


def resolve_version(legacy: int, supported_versions: list[int] | None) -> TlsVersion:
    """Effective protocol version of a hello.

    A supported_versions extension overrides the legacy field: its highest
    recognised, non-GREASE entry wins.
    """
    if supported_versions:
        known = [TlsVersion.from_code(v) for v in supported_versions if not is_grease(v)]
        known = [v for v in known if v is not TlsVersion.Unknown]
        return max(known) if known else TlsVersion.Unknown
    return TlsVersion.from_code(legacy)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EOFError
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def vec(self, width: int) -> bytes:
        n = self.u8() if width == 1 else self.u16()
        return self.take(n)


def _handshake_messages(data: bytes) -> list[tuple[int, bytes, bool]]:
    """Split a TLS byte stream into (handshake type, body, complete) messages.

    Handshake fragments are reassembled across records; parsing stops at the
    first ChangeCipherSpec, since later handshake records are encrypted.
    """
    if len(data) < 5 or data[0] != CONTENT_HANDSHAKE or data[1] != 3:
        return []
    hs = bytearray()
    pos = 0
    while pos + 5 <= len(data):
        ctype, major, _minor, length = struct.unpack_from(">BBBH", data, pos)
        if major != 3 or length > MAX_RECORD:
            break
        if ctype == CONTENT_CCS:
            break
        fragment = data[pos + 5:pos + 5 + length]
        if ctype == CONTENT_HANDSHAKE:
            hs += fragment
        pos += 5 + length
        if len(fragment) < length:
            break
    out = []
    p = 0
    while p + 4 <= len(hs):
        mtype = hs[p]
        mlen = int.from_bytes(hs[p + 1:p + 4], "big")
        body = bytes(hs[p + 4:p + 4 + mlen])
        out.append((mtype, body, len(body) == mlen))
        p += 4 + mlen
    return out


def _parse_extensions(r: _Reader, hello_type: int) -> tuple[str | None, list[int] | None]:
    server_name = None
    versions = None
    ext_block = _Reader(r.vec(2))
    while ext_block.pos + 4 <= len(ext_block.data):
        etype = ext_block.u16()
        edata = ext_block.vec(2)
        if etype == EXT_SERVER_NAME and hello_type == HS_CLIENT_HELLO:
            names = _Reader(edata)
            lst = _Reader(names.vec(2))
            while lst.pos < len(lst.data):
                ntype = lst.u8()
                name = lst.vec(2)
                if ntype == 0:
                    server_name = name.decode("ascii", "replace")
                    break
        elif etype == EXT_SUPPORTED_VERSIONS:
            er = _Reader(edata)
            if hello_type == HS_CLIENT_HELLO:
                raw = er.vec(1)
                versions = [int.from_bytes(raw[i:i + 2], "big") for i in range(0, len(raw) - 1, 2)]
            else:
                versions = [er.u16()]
    return server_name, versions


def parse_hello(mtype: int, body: bytes, complete: bool) -> dict | None:
    """Fields of one hello body; suites parsed before a truncation are kept."""
    r = _Reader(body)
    out = {"legacy": None, "suites": [], "server_name": None, "versions": None, "incomplete": not complete}
    try:
        out["legacy"] = r.u16()
        random = r.take(32)
        if mtype == HS_SERVER_HELLO and random == HELLO_RETRY_RANDOM:
            return None
        r.vec(1)  # session id
        if mtype == HS_CLIENT_HELLO:
            n = r.u16()
            for _ in range(n // 2):
                out["suites"].append(r.u16())
            r.vec(1)  # compression methods
        else:
            out["suites"].append(r.u16())
            r.u8()  # compression method
        if r.pos < len(body):
            out["server_name"], out["versions"] = _parse_extensions(r, mtype)
    except EOFError:
        out["incomplete"] = True
    if out["legacy"] is None:
        return None
    return out


def extract_handshakes(stream: StreamSegmentMap, capture_id: str = "") -> list[TlsHandshake]:
    """Every ClientHello (client->server) or ServerHello (server->client) in a stream."""
    want = HS_CLIENT_HELLO if stream.direction == C2S else HS_SERVER_HELLO
    records = []
    for offset, chunk, _after_gap in stream.chunks():
        for mtype, body, complete in _handshake_messages(chunk):
            if mtype != want:
                continue
            fields = parse_hello(mtype, body, complete)
            if fields is None:
                continue
            record_version = TlsVersion.from_code(fields["legacy"])
            records.append(TlsHandshake(
                capture_id=capture_id,
                flow=stream.flow,
                hello_type="ClientHello" if mtype == HS_CLIENT_HELLO else "ServerHello",
                record_version=record_version,
                effective_version=resolve_version(fields["legacy"], fields["versions"]),
                cipher_suites=tuple(fields["suites"]),
                server_name=fields["server_name"],
                ts=stream.ts_at(offset),
                incomplete=fields["incomplete"],
            ))
    return records


# -- building (used by fixture synthesis and tests) --------------------------

def build_client_hello(suites: list[int], *, legacy: int = 0x0303, server_name: str | None = None,
                       supported_versions: list[int] | None = None, random: bytes = b"\x11" * 32,
                       session_id: bytes = b"", padding_to: int | None = None) -> bytes:
    """Handshake message (type + length + body) for a ClientHello."""
    exts = bytearray()
    if server_name is not None:
        name = server_name.encode("ascii")
        entry = b"\x00" + struct.pack(">H", len(name)) + name
        sni = struct.pack(">H", len(entry)) + entry
        exts += struct.pack(">HH", EXT_SERVER_NAME, len(sni)) + sni
    if supported_versions:
        raw = b"".join(struct.pack(">H", v) for v in supported_versions)
        sv = bytes([len(raw)]) + raw
        exts += struct.pack(">HH", EXT_SUPPORTED_VERSIONS, len(sv)) + sv
    body = bytearray(struct.pack(">H", legacy) + random + bytes([len(session_id)]) + session_id)
    body += struct.pack(">H", 2 * len(suites)) + b"".join(struct.pack(">H", s) for s in suites)
    body += b"\x01\x00"
    if padding_to is not None:
        # padding extension (21) sized so the full record is padding_to bytes
        fixed = 5 + 4 + len(body) + 2 + len(exts) + 4
        pad = padding_to - fixed
        if pad < 0:
            raise ValueError(f"hello already exceeds {padding_to} bytes")
        exts += struct.pack(">HH", 21, pad) + b"\0" * pad
    body += struct.pack(">H", len(exts)) + exts
    return bytes([HS_CLIENT_HELLO]) + len(body).to_bytes(3, "big") + bytes(body)


def build_server_hello(suite: int, *, legacy: int = 0x0303, selected_version: int | None = None,
                       random: bytes = b"\x22" * 32) -> bytes:
    body = bytearray(struct.pack(">H", legacy) + random + b"\x00" + struct.pack(">H", suite) + b"\x00")
    if selected_version is not None:
        ext = struct.pack(">HHH", EXT_SUPPORTED_VERSIONS, 2, selected_version)
        body += struct.pack(">H", len(ext)) + ext
    return bytes([HS_SERVER_HELLO]) + len(body).to_bytes(3, "big") + bytes(body)


def wrap_records(handshake: bytes, *, split_at: list[int] | None = None, version: int = 0x0301) -> bytes:
    """Wrap handshake bytes into TLS records, optionally fragmenting at offsets."""
    cuts = [0] + sorted(split_at or []) + [len(handshake)]
    out = bytearray()
    for a, b in zip(cuts, cuts[1:]):
        if b > a:
            out += struct.pack(">BHH", CONTENT_HANDSHAKE, version, b - a) + handshake[a:b]
    return bytes(out)
