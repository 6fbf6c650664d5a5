import random

from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tcp_conn, udp_packet
from iotupdate.flows import C2S, S2C, FlowKey, group_udp, pair_streams, reassemble_tcp
from iotupdate.packets import TCP_ACK, Packet


def _seg(seq, payload, ts, src=("192.168.1.20", 50123), dst=("203.0.113.7", 80), flags=TCP_ACK):
    return Packet(index=ts, ts=ts, ip_version=4, src=src[0], dst=dst[0], protocol="TCP",
                  sport=src[1], dport=dst[1], seq=seq % (1 << 32), flags=flags, payload=payload)


def test_simple_connection_two_directions():
    streams = reassemble_tcp(tcp_conn([b"GET / HTTP/1.1\r\n", b"\r\n"], [b"HTTP/1.1 200 OK\r\n\r\n"]))
    assert [s.direction for s in streams] == [C2S, S2C]
    c, s = streams
    assert c.data == b"GET / HTTP/1.1\r\n\r\n" and c.gaps == [] and c.syn_seen and c.fin_seen
    assert s.data == b"HTTP/1.1 200 OK\r\n\r\n"
    assert c.flow == FlowKey("192.168.1.20", "203.0.113.7", 50123, 80, "TCP")
    assert pair_streams(streams) == [(c, s)]


def test_flow_id_is_direction_independent():
    k = FlowKey("10.0.0.2", "10.0.0.1", 80, 5555, "TCP")
    assert k.flow_id() == k.reverse().flow_id()
    assert k.canonical()[1] != k.reverse().canonical()[1]


def test_overlap_first_write_wins():
    base = tcp_conn([b"AAAAAAAA"], fin=False)
    # a later retransmission with different bytes over the same range must not win
    pkts = base + [_seg(1001 + 4, b"ZZZZZZZZ", 99)]
    (c,) = reassemble_tcp(pkts)
    assert c.data == b"AAAAAAAAZZZZ"


def test_gap_is_recorded():
    pkts = tcp_conn([b"0123"], fin=False) + [_seg(1001 + 10, b"abcd", 50)]
    (c,) = reassemble_tcp(pkts)
    assert c.data == b"0123abcd"
    assert c.gaps == [(4, 6)]
    assert [(off, chunk, gap) for off, chunk, gap in c.chunks()] == [(0, b"0123", False), (4, b"abcd", True)]


def test_midstream_stream_has_leading_gap_marker():
    pkts = tcp_conn([b"tail of something"], handshake=False, fin=False)
    (c,) = reassemble_tcp(pkts)
    assert c.midstream and c.gaps == [(0, 0)]
    # without a SYN the lower port is taken as the server
    assert c.flow.dst_port == 80


def test_sequence_wraparound():
    isn = (1 << 32) - 5
    (c,) = reassemble_tcp(tcp_conn([b"abcdef", b"ghijkl"], isn_c=isn, fin=False))
    assert c.data == b"abcdefghijkl" and c.gaps == []


def test_reused_ports_after_close_start_a_new_session():
    pkts = tcp_conn([b"first"]) + tcp_conn([b"second"], isn_c=5000, ts0=100)
    streams = reassemble_tcp(pkts)
    assert [(s.session, s.data) for s in streams] == [(0, b"first"), (1, b"second")]


def test_offsets_track_first_supplier_timestamp():
    (c,) = reassemble_tcp(tcp_conn([b"aa", b"bb"], fin=False))
    assert c.ts_at(0) == 2 and c.ts_at(3) == 3


def test_group_udp_marks_ssdp():
    groups = group_udp([udp_packet(b"NOTIFY * HTTP/1.1\r\n\r\n"),
                        udp_packet(b"x", src=("10.0.0.1", 5353), dst=("224.0.0.251", 5353))])
    assert sorted(g.ssdp_candidate for g in groups) == [False, True]


# -- permutation invariance ----------------------------------------------------

def split_stream(data: bytes, rng: random.Random) -> list[tuple[int, bytes]]:
    """Cut ``data`` into gap-free segments (offset, bytes), with some overlapping duplicates."""
    segs = []
    pos = 0
    while pos < len(data):
        n = rng.randint(1, 64)
        segs.append((pos, data[pos:pos + n]))
        pos += n
    for _ in range(rng.randint(0, 3)):
        off, chunk = rng.choice(segs)
        segs.append((off, chunk))  # exact retransmission: same bytes, so order cannot matter
    return segs


def reassembled(segs, isn, order) -> bytes:
    syn = _seg(isn, b"", 0, flags=0x02)
    pkts = [syn] + [_seg(isn + 1 + segs[i][0], segs[i][1], k + 1) for k, i in enumerate(order)]
    (s,) = reassemble_tcp(pkts)
    assert s.gaps == []
    return s.data


@settings(max_examples=60, deadline=None)
@given(data=st.binary(min_size=1, max_size=600), seed=st.integers(0, 2**32 - 1),
       isn=st.integers(0, 2**32 - 1))
def test_reassembly_is_permutation_invariant(data, seed, isn):
    rng = random.Random(seed)
    segs = split_stream(data, rng)
    order = list(range(len(segs)))
    expected = reassembled(segs, isn, order)
    assert expected == data
    rng.shuffle(order)
    assert reassembled(segs, isn, order) == expected
