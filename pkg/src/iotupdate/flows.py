"""Flow bookkeeping: TCP byte-stream reassembly and UDP datagram grouping."""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .packets import Packet

SEQ_MOD = 1 << 32
SSDP_GROUP = ("239.255.255.250", "ff02::c", "ff05::c", "ff08::c")
SSDP_PORT = 1900

C2S = "client->server"
S2C = "server->client"


@dataclass(frozen=True, order=True)
class FlowKey:
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    protocol: str

    def reverse(self) -> "FlowKey":
        return FlowKey(self.dst_addr, self.src_addr, self.dst_port, self.src_port, self.protocol)

    def canonical(self) -> tuple["FlowKey", str]:
        """Bidirectional id plus the direction of ``self`` relative to it.

        The id is the orientation whose (addr, port) endpoint sorts first; a
        key and its reverse share one id with opposite direction tags.
        """
        a = (_addr_sort_key(self.src_addr), self.src_port)
        b = (_addr_sort_key(self.dst_addr), self.dst_port)
        if a <= b:
            return self, "forward"
        return self.reverse(), "reverse"

    def flow_id(self) -> str:
        key, _ = self.canonical()
        return f"{key.protocol}:{key.src_addr}:{key.src_port}-{key.dst_addr}:{key.dst_port}"

    def __str__(self) -> str:
        return f"{self.protocol} {self.src_addr}:{self.src_port} -> {self.dst_addr}:{self.dst_port}"


def _addr_sort_key(addr: str) -> tuple[int, str]:
    return (1 if ":" in addr else 0, addr)


@dataclass
class StreamSegmentMap:
    """One direction of one TCP connection, reassembled.

    ``flow`` is always oriented client -> server; ``direction`` says which
    side sent ``data``. ``gaps`` holds (offset into ``data``, missing length);
    a length of 0 marks a leading gap of unknown extent (no SYN observed).
    ``offsets`` maps data offsets to the capture timestamp of the segment that
    first supplied those bytes.
    """

    flow: FlowKey
    direction: str
    data: bytes
    gaps: list[tuple[int, int]] = field(default_factory=list)
    first_ts: int = 0
    last_ts: int = 0
    offsets: list[tuple[int, int]] = field(default_factory=list)
    syn_seen: bool = False
    fin_seen: bool = False
    session: int = 0

    @property
    def midstream(self) -> bool:
        return not self.syn_seen

    def ts_at(self, offset: int) -> int:
        if not self.offsets:
            return self.first_ts
        i = bisect.bisect_right(self.offsets, (offset, float("inf"))) - 1
        return self.offsets[max(i, 0)][1]

    def chunks(self) -> list[tuple[int, bytes, bool]]:
        """Contiguous runs of data as (offset, bytes, preceded_by_gap)."""
        cuts = sorted({off for off, _ in self.gaps if 0 < off < len(self.data)})
        out = []
        start = 0
        leading = any(off == 0 for off, _ in self.gaps)
        for cut in cuts + [len(self.data)]:
            if cut > start:
                out.append((start, self.data[start:cut], leading if start == 0 else True))
            start = cut
        return out


@dataclass
class DatagramGroup:
    flow: FlowKey
    datagrams: list[Packet]
    ssdp_candidate: bool = False


def _seq_sub(a: int, b: int) -> int:
    """a - b in TCP sequence space, as a signed 32-bit distance."""
    d = (a - b) % SEQ_MOD
    return d - SEQ_MOD if d >= SEQ_MOD // 2 else d


def _server_side(key: FlowKey, first: FlowKey, syn_from: FlowKey | None) -> FlowKey:
    """Return the client->server orientation of a connection."""
    if syn_from is not None:
        return syn_from
    # no handshake seen: the lower, well-known-looking port is the server
    if key.src_port != key.dst_port:
        return key if key.dst_port < key.src_port else key.reverse()
    return first


def reassemble_tcp(packets: Iterable[Packet]) -> list[StreamSegmentMap]:
    """Reassemble every TCP connection direction that carries payload.

    Overlapping data is resolved first-write-wins in capture order. Output is
    ordered by (canonical flow id, session, direction).
    """
    conns: dict[tuple[FlowKey, int], dict] = {}
    session_no: dict[FlowKey, int] = defaultdict(int)
    for pkt in packets:
        if pkt.protocol != "TCP":
            continue
        key = FlowKey(pkt.src, pkt.dst, pkt.sport, pkt.dport, "TCP")
        canon, _ = key.canonical()
        sess = session_no[canon]
        conn = conns.get((canon, sess))
        pure_syn = pkt.syn and not (pkt.flags & 0x10)
        if conn is not None and pure_syn and conn["closed"]:
            sess += 1
            session_no[canon] = sess
            conn = None
        if conn is None:
            conn = {"first": key, "syn_from": None, "dirs": {}, "closed": False}
            conns[(canon, sess)] = conn
        if pure_syn:
            conn["syn_from"] = conn["syn_from"] or key
        d = conn["dirs"].setdefault(key, {"isn": None, "segs": [], "fin": False, "first_ts": pkt.ts})
        if pkt.syn:
            d["isn"] = pkt.seq
        if pkt.fin or pkt.flags & 0x04:
            d["fin"] = True
            conn["closed"] = True
        if pkt.payload:
            d["segs"].append((pkt.seq + (1 if pkt.syn else 0), pkt.payload, pkt.ts))

    out: list[StreamSegmentMap] = []
    for (canon, sess), conn in sorted(conns.items(), key=lambda kv: (kv[0][0].flow_id(), kv[0][1])):
        c2s = _server_side(canon, conn["first"], conn["syn_from"])
        for key, direction in ((c2s, C2S), (c2s.reverse(), S2C)):
            d = conn["dirs"].get(key)
            if d is None or not d["segs"]:
                continue
            stream = _assemble(d)
            stream.flow = c2s
            stream.direction = direction
            stream.session = sess
            out.append(stream)
    return out


def _assemble(d: dict) -> StreamSegmentMap:
    segs = d["segs"]
    syn_seen = d["isn"] is not None
    if syn_seen:
        base = (d["isn"] + 1) % SEQ_MOD
    else:
        ref = segs[0][0]
        base = ref + min(_seq_sub(s, ref) for s, _, _ in segs)
    placed: list[tuple[int, int, bytes, int]] = []  # (start, end, bytes, ts) disjoint
    for seq, payload, ts in segs:
        start = _seq_sub(seq, base)
        end = start + len(payload)
        if end <= 0:
            continue
        if start < 0:
            payload = payload[-start:]
            start = 0
        for piece_start, piece in list(_unclaimed(placed, start, payload)):
            bisect.insort(placed, (piece_start, piece_start + len(piece), piece, ts))

    data = bytearray()
    gaps: list[tuple[int, int]] = [] if syn_seen else [(0, 0)]
    offsets: list[tuple[int, int]] = []
    cursor = placed[0][0] if placed else 0
    if syn_seen and cursor > 0:
        gaps.append((0, cursor))
    for start, end, piece, ts in placed:
        if start > cursor:
            gaps.append((len(data), start - cursor))
        offsets.append((len(data), ts))
        data += piece
        cursor = end
    tss = [ts for _, _, ts in segs]
    return StreamSegmentMap(
        flow=None, direction="", data=bytes(data), gaps=gaps,
        first_ts=min(tss), last_ts=max(tss), offsets=offsets,
        syn_seen=syn_seen, fin_seen=d["fin"],
    )


def _unclaimed(placed: list[tuple[int, int, bytes, int]], start: int, payload: bytes):
    """Pieces of [start, start+len) not already covered by ``placed``."""
    end = start + len(payload)
    i = bisect.bisect_left(placed, (start,))
    if i > 0 and placed[i - 1][1] > start:
        i -= 1
    cur = start
    while cur < end:
        if i < len(placed) and placed[i][0] <= cur:
            cur = max(cur, placed[i][1])
            i += 1
            continue
        nxt = placed[i][0] if i < len(placed) else end
        stop = min(nxt, end)
        if stop > cur:
            yield cur, payload[cur - start:stop - start]
        cur = stop


def pair_streams(streams: list[StreamSegmentMap]) -> list[tuple[StreamSegmentMap | None, StreamSegmentMap | None]]:
    """Group streams into (client->server, server->client) pairs per connection."""
    pairs: dict[tuple[FlowKey, int], list] = {}
    order: list[tuple[FlowKey, int]] = []
    for s in streams:
        k = (s.flow, s.session)
        if k not in pairs:
            pairs[k] = [None, None]
            order.append(k)
        pairs[k][0 if s.direction == C2S else 1] = s
    return [tuple(pairs[k]) for k in order]


def group_udp(packets: Iterable[Packet]) -> list[DatagramGroup]:
    """Group UDP datagrams per directed FlowKey, each group ordered by timestamp."""
    groups: dict[FlowKey, list[Packet]] = {}
    for pkt in packets:
        if pkt.protocol != "UDP":
            continue
        key = FlowKey(pkt.src, pkt.dst, pkt.sport, pkt.dport, "UDP")
        groups.setdefault(key, []).append(pkt)
    out = []
    for key in sorted(groups, key=lambda k: (k.flow_id(), k)):
        dgrams = sorted(groups[key], key=lambda p: (p.ts, p.index))
        ssdp = SSDP_PORT in (key.src_port, key.dst_port) or key.dst_addr in SSDP_GROUP
        out.append(DatagramGroup(key, dgrams, ssdp))
    return out
