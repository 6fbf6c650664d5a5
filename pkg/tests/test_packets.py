import struct

import pytest

from iotupdate.packets import (IPPROTO_TCP, IPPROTO_UDP, LINKTYPE_ETHERNET, TCP_ACK, CaptureFormatError,
                               build_ipv4_frame, build_ipv6_frame, decode_capture, iter_frames, tcp_segment,
                               udp_datagram, write_pcap)

TS = 1_600_000_000_123_456_000


def _frames():
    a = build_ipv4_frame("10.0.0.1", "10.0.0.2", IPPROTO_TCP, tcp_segment(1234, 80, 7, 9, TCP_ACK, b"hello"))
    b = build_ipv6_frame("fe80::1", "ff02::c", IPPROTO_UDP, udp_datagram(5000, 1900, b"M-SEARCH"))
    return [(TS, a), (TS + 1000, b)]


def test_pcap_roundtrip_decodes_tcp_and_udp():
    cap = decode_capture(write_pcap(_frames()))
    assert cap.packet_count == 2 and not cap.truncated
    tcp, udp = cap.packets
    assert (tcp.protocol, tcp.src, tcp.dst, tcp.sport, tcp.dport, tcp.seq, tcp.ack) == \
        ("TCP", "10.0.0.1", "10.0.0.2", 1234, 80, 7, 9)
    assert tcp.payload == b"hello" and tcp.ts == TS
    assert (udp.protocol, udp.ip_version, udp.dst, udp.dport, udp.payload) == ("UDP", 6, "ff02::c", 1900, b"M-SEARCH")


def test_big_endian_nanosecond_pcap():
    frame = _frames()[0][1]
    hdr = struct.pack(">IHHiIII", 0xA1B23C4D, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET)
    rec = struct.pack(">IIII", 5, 7, len(frame), len(frame)) + frame
    cap = decode_capture(hdr + rec)
    assert cap.packets[0].ts == 5_000_000_007


def _pcapng(frames, tsresol=None):
    def block(btype, body):
        body += b"\0" * (-len(body) % 4)
        n = len(body) + 12
        return struct.pack("<II", btype, n) + body + struct.pack("<I", n)

    out = block(0x0A0D0D0A, struct.pack("<IHHq", 0x1A2B3C4D, 1, 0, -1))
    opts = b""
    if tsresol is not None:
        opts = struct.pack("<HHB3x", 9, 1, tsresol) + struct.pack("<HH", 0, 0)
    out += block(1, struct.pack("<HHI", LINKTYPE_ETHERNET, 0, 0) + opts)
    for ts_ticks, frame in frames:
        out += block(6, struct.pack("<IIIII", 0, ts_ticks >> 32, ts_ticks & 0xFFFFFFFF, len(frame), len(frame)) + frame)
    return out


def test_pcapng_default_microsecond_resolution():
    frame = _frames()[0][1]
    cap = decode_capture(_pcapng([(1_500_000, frame)]))
    assert cap.packet_count == 1
    assert cap.packets[0].ts == 1_500_000_000
    assert cap.packets[0].payload == b"hello"


def test_pcapng_nanosecond_resolution_option():
    frame = _frames()[0][1]
    cap = decode_capture(_pcapng([(42, frame)], tsresol=9))
    assert cap.packets[0].ts == 42


def test_unknown_magic_is_a_format_error():
    with pytest.raises(CaptureFormatError):
        decode_capture(b"\x00" * 64)
    with pytest.raises(CaptureFormatError):
        decode_capture(b"ab")


def test_truncated_final_record_keeps_earlier_packets():
    data = write_pcap(_frames())
    cap = decode_capture(data[:-5])
    assert cap.truncated
    assert cap.packet_count == 1
    assert cap.warnings


def test_iter_frames_indices_are_sequential():
    frames = list(iter_frames(write_pcap(_frames() * 3)))
    assert [f.index for f in frames] == list(range(6))


def _fragment(frame: bytes, cut: int) -> list[bytes]:
    """Split an Ethernet+IPv4 frame into two fragments at payload offset ``cut`` (multiple of 8)."""
    eth, ip = frame[:14], frame[14:]
    ihl = (ip[0] & 0x0F) * 4
    hdr, payload = ip[:ihl], ip[ihl:]
    out = []
    for off, part, more in ((0, payload[:cut], True), (cut, payload[cut:], False)):
        h = bytearray(hdr)
        struct.pack_into(">H", h, 2, ihl + len(part))
        struct.pack_into(">H", h, 6, (0x2000 if more else 0) | (off // 8))
        struct.pack_into(">H", h, 10, 0)
        s = sum(struct.unpack(f">{len(h) // 2}H", bytes(h)))
        while s >> 16:
            s = (s & 0xFFFF) + (s >> 16)
        struct.pack_into(">H", h, 10, ~s & 0xFFFF)
        out.append(eth + bytes(h) + part)
    return out


def test_ipv4_fragments_are_reassembled_in_any_order():
    payload = bytes(range(256)) * 4
    frame = build_ipv4_frame("10.0.0.1", "10.0.0.2", IPPROTO_UDP, udp_datagram(4000, 4001, payload), ident=77)
    first, second = _fragment(frame, 512)
    for order in ((first, second), (second, first)):
        cap = decode_capture(write_pcap([(TS, f) for f in order]))
        assert cap.packet_count == 2
        assert len(cap.packets) == 1
        assert cap.packets[0].payload == payload
