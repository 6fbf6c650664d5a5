from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from iotupdate.config import load_config
from iotupdate.packets import TCP_ACK, TCP_FIN, TCP_SYN, Packet

TESTS = Path(__file__).parent
CORPUS = TESTS / "fixtures" / "corpus"
MANIFESTS = TESTS / "fixtures" / "manifests"
DATA = TESTS / "data"


def tcp_conn(c2s: list[bytes], s2c: list[bytes] = (), *, client=("192.168.1.20", 50123),
             server=("203.0.113.7", 80), isn_c=1000, isn_s=90000, handshake=True, fin=True, ts0=0):
    """Packets for one TCP connection: optional handshake, all client segments,
    then all server segments, then FINs. Timestamps step by 1."""
    pkts = []
    ts = ts0

    def add(src, dst, seq, ack, flags, payload=b""):
        nonlocal ts
        pkts.append(Packet(index=len(pkts), ts=ts, ip_version=4, src=src[0], dst=dst[0], protocol="TCP",
                           sport=src[1], dport=dst[1], seq=seq % (1 << 32), ack=ack % (1 << 32),
                           flags=flags, payload=payload))
        ts += 1

    cseq, sseq = isn_c, isn_s
    if handshake:
        add(client, server, cseq, 0, TCP_SYN)
        add(server, client, sseq, cseq + 1, TCP_SYN | TCP_ACK)
        cseq += 1
        sseq += 1
    for seg in c2s:
        add(client, server, cseq, sseq, TCP_ACK, seg)
        cseq += len(seg)
    for seg in s2c:
        add(server, client, sseq, cseq, TCP_ACK, seg)
        sseq += len(seg)
    if fin:
        add(client, server, cseq, sseq, TCP_FIN | TCP_ACK)
        add(server, client, sseq, cseq + 1, TCP_FIN | TCP_ACK)
    return pkts


def udp_packet(payload: bytes, src=("192.168.1.30", 1900), dst=("239.255.255.250", 1900), ts=0) -> Packet:
    return Packet(index=0, ts=ts, ip_version=4, src=src[0], dst=dst[0], protocol="UDP",
                  sport=src[1], dport=dst[1], payload=payload)


@pytest.fixture(scope="session")
def config():
    return load_config()


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory, config):
    """The committed scenario corpus extracted once (workers=1)."""
    from iotupdate.pipeline import run_extract

    out = tmp_path_factory.mktemp("fixture_run")
    result = run_extract(CORPUS, out, out / "store.sqlite", config, workers=1)
    return out, result


@pytest.fixture
def corpus_copy(tmp_path):
    dst = tmp_path / "corpus"
    shutil.copytree(CORPUS, dst)
    return dst


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
