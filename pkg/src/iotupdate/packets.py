"""Reading pcap / pcapng containers and decoding link, IP and transport layers.

Timestamps are kept as integer nanoseconds since the epoch so that decode
results are exact and comparable across runs.
"""

from __future__ import annotations

import ipaddress
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterator

log = logging.getLogger(__name__)

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
PCAPNG_SHB = 0x0A0D0D0A
PCAPNG_BOM = 0x1A2B3C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_RAW_ALT = 12
LINKTYPE_LOOP = 108
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
LINKTYPE_LINUX_SLL2 = 276

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = (0x8100, 0x88A8, 0x9100)

IPPROTO_TCP = 6
IPPROTO_UDP = 17
IPV6_EXT_HEADERS = (0, 43, 60, 51)
IPV6_FRAGMENT = 44

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10


class CaptureFormatError(ValueError):
    """The capture's global header is missing or corrupt."""


@dataclass(frozen=True)
class Frame:
    """One raw record out of a capture file."""

    index: int
    ts: int
    linktype: int
    data: bytes
    orig_len: int


@dataclass(frozen=True)
class Packet:
    """A decoded frame. ``protocol`` is "TCP", "UDP" or None for anything else."""

    index: int
    ts: int
    ip_version: int | None = None
    src: str | None = None
    dst: str | None = None
    protocol: str | None = None
    sport: int = 0
    dport: int = 0
    seq: int = 0
    ack: int = 0
    flags: int = 0
    payload: bytes = b""
    opaque: bool = False

    @property
    def syn(self) -> bool:
        return bool(self.flags & TCP_SYN)

    @property
    def fin(self) -> bool:
        return bool(self.flags & TCP_FIN)


@dataclass
class DecodedCapture:
    packets: list[Packet]
    packet_count: int
    truncated: bool = False
    opaque_count: int = 0
    ipv6_fragments_skipped: int = 0
    warnings: list[str] = field(default_factory=list)


def iter_frames(data: bytes) -> Iterator[Frame]:
    """Yield frames from classic pcap or pcapng bytes.

    Raises CaptureFormatError when the leading magic is not recognised. A
    truncated final record ends iteration; callers learn about it through
    ``FrameReader.truncated``.
    """
    reader = FrameReader(data)
    yield from reader


class FrameReader:
    def __init__(self, data: bytes):
        if len(data) < 4:
            raise CaptureFormatError("file too short for a capture header")
        self.data = data
        self.truncated = False
        magic_le = struct.unpack_from("<I", data)[0]
        magic_be = struct.unpack_from(">I", data)[0]
        if magic_le == PCAPNG_SHB:
            self.kind = "pcapng"
        elif PCAP_MAGIC_US in (magic_le, magic_be) or PCAP_MAGIC_NS in (magic_le, magic_be):
            self.kind = "pcap"
        else:
            raise CaptureFormatError(f"unrecognised capture magic 0x{magic_le:08x}")

    def __iter__(self) -> Iterator[Frame]:
        if self.kind == "pcap":
            return self._iter_pcap()
        return self._iter_pcapng()

    def _iter_pcap(self) -> Iterator[Frame]:
        data = self.data
        if len(data) < 24:
            raise CaptureFormatError("truncated pcap global header")
        magic = struct.unpack_from("<I", data)[0]
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            endian = "<"
        else:
            endian = ">"
            magic = struct.unpack_from(">I", data)[0]
        scale = 1 if magic == PCAP_MAGIC_NS else 1000
        major, _minor, _zone, _sigfigs, _snaplen, network = struct.unpack_from(endian + "HHiIII", data, 4)
        if major != 2:
            raise CaptureFormatError(f"unsupported pcap major version {major}")
        linktype = network & 0x0FFFFFFF
        hdr = struct.Struct(endian + "IIII")
        pos = 24
        index = 0
        while pos < len(data):
            if pos + 16 > len(data):
                self._truncate(f"record header at offset {pos}")
                return
            sec, frac, incl, orig = hdr.unpack_from(data, pos)
            pos += 16
            if pos + incl > len(data):
                self._truncate(f"record body at offset {pos}")
                return
            yield Frame(index, sec * 1_000_000_000 + frac * scale, linktype, data[pos:pos + incl], orig)
            pos += incl
            index += 1

    def _iter_pcapng(self) -> Iterator[Frame]:
        data = self.data
        pos = 0
        endian = "<"
        interfaces: list[tuple[int, int, int]] = []  # (linktype, snaplen, ticks/second)
        index = 0
        while pos < len(data):
            if pos + 12 > len(data):
                self._truncate(f"block header at offset {pos}")
                return
            btype = struct.unpack_from(endian + "I", data, pos)[0]
            if btype == PCAPNG_SHB:  # palindromic, endian-independent
                bom = data[pos + 8:pos + 12]
                if bom == struct.pack("<I", PCAPNG_BOM):
                    endian = "<"
                elif bom == struct.pack(">I", PCAPNG_BOM):
                    endian = ">"
                else:
                    raise CaptureFormatError("bad pcapng byte-order magic")
                interfaces = []
            blen = struct.unpack_from(endian + "I", data, pos + 4)[0]
            if blen < 12 or blen % 4:
                if pos == 0:
                    raise CaptureFormatError(f"bad pcapng block length {blen}")
                self._truncate(f"corrupt block length {blen} at offset {pos}")
                return
            if pos + blen > len(data):
                self._truncate(f"block body at offset {pos}")
                return
            body = data[pos + 8:pos + blen - 4]
            if btype == 1:
                linktype, _res, snaplen = struct.unpack_from(endian + "HHI", body)
                interfaces.append((linktype, snaplen, _if_tsresol(body[8:], endian)))
            elif btype in (6, 2):
                if btype == 6:
                    iface, ts_hi, ts_lo, caplen, orig = struct.unpack_from(endian + "IIIII", body)
                else:
                    iface, _drops, ts_hi, ts_lo, caplen, orig = struct.unpack_from(endian + "HHIIII", body)
                if iface < len(interfaces):
                    linktype, _snap, tps = interfaces[iface]
                    ticks = (ts_hi << 32) | ts_lo
                    yield Frame(index, _ticks_to_ns(ticks, tps), linktype, body[20:20 + caplen], orig)
                    index += 1
            elif btype == 3:
                if interfaces:
                    linktype, snaplen, _tps = interfaces[0]
                    orig = struct.unpack_from(endian + "I", body)[0]
                    caplen = min(orig, len(body) - 4)
                    if snaplen:
                        caplen = min(caplen, snaplen)
                    yield Frame(index, 0, linktype, body[4:4 + caplen], orig)
                    index += 1
            pos += blen

    def _truncate(self, where: str) -> None:
        self.truncated = True
        log.warning("capture truncated: incomplete %s", where)


def _if_tsresol(options: bytes, endian: str) -> int:
    pos = 0
    while pos + 4 <= len(options):
        code, length = struct.unpack_from(endian + "HH", options, pos)
        if code == 0:
            break
        if code == 9 and length >= 1:
            v = options[pos + 4]
            return 2 ** (v & 0x7F) if v & 0x80 else 10 ** v
        pos += 4 + length + (-length % 4)
    return 1_000_000


def _ticks_to_ns(ticks: int, per_second: int) -> int:
    return ticks * 1_000_000_000 // per_second


class _Fragments:
    """IPv4 fragment buffers for one capture."""

    def __init__(self) -> None:
        self.pending: dict[tuple, dict] = {}

    def add(self, key: tuple, offset: int, more: bool, payload: bytes) -> bytes | None:
        entry = self.pending.setdefault(key, {"parts": {}, "total": None})
        entry["parts"].setdefault(offset, payload)
        if not more:
            entry["total"] = offset + len(payload)
        total = entry["total"]
        if total is None:
            return None
        buf = bytearray(total)
        covered = 0
        for off in sorted(entry["parts"]):
            part = entry["parts"][off]
            if off > covered:
                return None
            end = min(off + len(part), total)
            if end > covered:
                buf[covered:end] = part[covered - off:end - off]
                covered = end
        if covered < total:
            return None
        del self.pending[key]
        return bytes(buf)


def decode_capture(data: bytes) -> DecodedCapture:
    """Decode every frame of a capture into a Packet."""
    reader = FrameReader(data)
    frags = _Fragments()
    packets: list[Packet] = []
    result = DecodedCapture(packets=packets, packet_count=0)
    for frame in reader:
        result.packet_count += 1
        pkt = decode_frame(frame, frags, result)
        if pkt is not None:
            if pkt.opaque:
                result.opaque_count += 1
            packets.append(pkt)
    if reader.truncated:
        result.truncated = True
        result.warnings.append("truncated final record")
    return result


def decode_frame(frame: Frame, frags: _Fragments | None = None, stats: DecodedCapture | None = None) -> Packet | None:
    """Decode one frame; returns None only for IP fragments still awaiting their peers."""
    data = frame.data
    lt = frame.linktype
    try:
        if lt == LINKTYPE_ETHERNET:
            ethertype, off = _ethernet(data)
        elif lt in (LINKTYPE_RAW, LINKTYPE_RAW_ALT):
            ethertype, off = _raw_ip_version(data), 0
        elif lt == LINKTYPE_IPV4:
            ethertype, off = ETH_IPV4, 0
        elif lt == LINKTYPE_IPV6:
            ethertype, off = ETH_IPV6, 0
        elif lt == LINKTYPE_LINUX_SLL:
            ethertype, off = struct.unpack_from(">H", data, 14)[0], 16
        elif lt == LINKTYPE_LINUX_SLL2:
            ethertype, off = struct.unpack_from(">H", data, 0)[0], 20
        elif lt in (LINKTYPE_NULL, LINKTYPE_LOOP):
            ethertype, off = _raw_ip_version(data[4:]), 4
        else:
            return Packet(frame.index, frame.ts, opaque=True, payload=data)
    except struct.error:
        return Packet(frame.index, frame.ts, opaque=True, payload=data)

    if ethertype == ETH_IPV4:
        return _ipv4(frame, data, off, frags, stats)
    if ethertype == ETH_IPV6:
        return _ipv6(frame, data, off, stats)
    return Packet(frame.index, frame.ts)


def _raw_ip_version(data: bytes) -> int | None:
    if not data:
        return None
    v = data[0] >> 4
    return ETH_IPV4 if v == 4 else ETH_IPV6 if v == 6 else None


def _ethernet(data: bytes) -> tuple[int, int]:
    ethertype = struct.unpack_from(">H", data, 12)[0]
    off = 14
    while ethertype in ETH_VLAN:
        ethertype = struct.unpack_from(">H", data, off + 2)[0]
        off += 4
    return ethertype, off


def _ipv4(frame: Frame, data: bytes, off: int, frags: _Fragments | None, stats) -> Packet:
    if len(data) < off + 20:
        return Packet(frame.index, frame.ts, ip_version=4)
    ver_ihl, _tos, total_len, ident, flags_off, _ttl, proto = struct.unpack_from(">BBHHHBB", data, off)
    ihl = (ver_ihl & 0x0F) * 4
    src = str(ipaddress.IPv4Address(data[off + 12:off + 16]))
    dst = str(ipaddress.IPv4Address(data[off + 16:off + 20]))
    end = off + total_len if total_len >= ihl else len(data)
    payload = data[off + ihl:min(end, len(data))]
    more = bool(flags_off & 0x2000)
    frag_off = (flags_off & 0x1FFF) * 8
    if more or frag_off:
        if frags is None:
            return Packet(frame.index, frame.ts, ip_version=4, src=src, dst=dst)
        whole = frags.add((src, dst, ident, proto), frag_off, more, payload)
        if whole is None:
            return None
        payload = whole
    return _transport(frame, 4, src, dst, proto, payload)


def _ipv6(frame: Frame, data: bytes, off: int, stats) -> Packet:
    if len(data) < off + 40:
        return Packet(frame.index, frame.ts, ip_version=6)
    plen = struct.unpack_from(">H", data, off + 4)[0]
    nxt = data[off + 6]
    src = str(ipaddress.IPv6Address(data[off + 8:off + 24]))
    dst = str(ipaddress.IPv6Address(data[off + 24:off + 40]))
    pos = off + 40
    end = min(pos + plen, len(data)) if plen else len(data)
    while nxt in IPV6_EXT_HEADERS and pos + 2 <= end:
        hdr_len = (data[pos + 1] + 2) * 4 if nxt == 51 else (data[pos + 1] + 1) * 8
        nxt = data[pos]
        pos += hdr_len
    if nxt == IPV6_FRAGMENT:
        if stats is not None:
            stats.ipv6_fragments_skipped += 1
        return Packet(frame.index, frame.ts, ip_version=6, src=src, dst=dst)
    return _transport(frame, 6, src, dst, nxt, data[pos:end])


def _transport(frame: Frame, version: int, src: str, dst: str, proto: int, seg: bytes) -> Packet:
    if proto == IPPROTO_TCP and len(seg) >= 20:
        sport, dport, seq, ack, off_flags = struct.unpack_from(">HHIIH", seg)
        hlen = (off_flags >> 12) * 4
        return Packet(frame.index, frame.ts, version, src, dst, "TCP", sport, dport,
                      seq, ack, off_flags & 0x01FF, seg[hlen:])
    if proto == IPPROTO_UDP and len(seg) >= 8:
        sport, dport, ulen = struct.unpack_from(">HHH", seg)
        end = ulen if 8 <= ulen <= len(seg) else len(seg)
        return Packet(frame.index, frame.ts, version, src, dst, "UDP", sport, dport, payload=seg[8:end])
    return Packet(frame.index, frame.ts, version, src, dst)


# -- writing -----------------------------------------------------------------

def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f">{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_ipv4_frame(src: str, dst: str, proto: int, segment: bytes, *, ident: int = 0,
                     src_mac: bytes = b"\x02\0\0\0\0\x01", dst_mac: bytes = b"\x02\0\0\0\0\x02") -> bytes:
    """Ethernet + IPv4 frame around an already-built transport segment."""
    s = ipaddress.IPv4Address(src).packed
    d = ipaddress.IPv4Address(dst).packed
    segment = _with_transport_checksum(proto, segment, s + d + struct.pack(">BBH", 0, proto, len(segment)))
    hdr = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(segment), ident & 0xFFFF, 0x4000, 64, proto, 0, s, d)
    hdr = hdr[:10] + struct.pack(">H", _checksum(hdr)) + hdr[12:]
    return dst_mac + src_mac + struct.pack(">H", ETH_IPV4) + hdr + segment


def build_ipv6_frame(src: str, dst: str, proto: int, segment: bytes, *,
                     src_mac: bytes = b"\x02\0\0\0\0\x01", dst_mac: bytes = b"\x02\0\0\0\0\x02") -> bytes:
    s = ipaddress.IPv6Address(src).packed
    d = ipaddress.IPv6Address(dst).packed
    segment = _with_transport_checksum(proto, segment, s + d + struct.pack(">IxxxB", len(segment), proto))
    hdr = struct.pack(">IHBB16s16s", 6 << 28, len(segment), proto, 64, s, d)
    return dst_mac + src_mac + struct.pack(">H", ETH_IPV6) + hdr + segment


def _with_transport_checksum(proto: int, segment: bytes, pseudo: bytes) -> bytes:
    pos = 16 if proto == IPPROTO_TCP else 6
    csum = _checksum(pseudo + segment)
    if proto == IPPROTO_UDP and csum == 0:
        csum = 0xFFFF
    return segment[:pos] + struct.pack(">H", csum) + segment[pos + 2:]


def tcp_segment(sport: int, dport: int, seq: int, ack: int, flags: int, payload: bytes = b"") -> bytes:
    return struct.pack(">HHIIHHHH", sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                       (5 << 12) | flags, 65535, 0, 0) + payload


def udp_datagram(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


def write_pcap(frames: list[tuple[int, bytes]], linktype: int = LINKTYPE_ETHERNET) -> bytes:
    """Serialise (timestamp_ns, frame) pairs as a microsecond little-endian pcap."""
    out = [struct.pack("<IHHiIII", PCAP_MAGIC_US, 2, 4, 0, 0, 262144, linktype)]
    for ts, frame in frames:
        sec, ns = divmod(ts, 1_000_000_000)
        out.append(struct.pack("<IIII", sec, ns // 1000, len(frame), len(frame)))
        out.append(frame)
    return b"".join(out)
