import pytest

from conftest import tcp_conn
from iotupdate.flows import reassemble_tcp
from iotupdate.tls import (TlsVersion, build_client_hello, build_server_hello, extract_handshakes, is_grease,
                           resolve_version, wrap_records)

SUITES = [0x0A0A, 0x1301, 0xC02F, 0x002F, 0x000A]


def hellos(c2s, s2c=()):
    out = []
    for s in reassemble_tcp(tcp_conn(c2s, s2c, server=("203.0.113.9", 443))):
        out += extract_handshakes(s, "cap")
    return out


def client_record(**kw):
    return wrap_records(build_client_hello(SUITES, **kw))


def test_client_hello_fields():
    (hs,) = hellos([client_record(server_name="fw.example.com")])
    assert hs.hello_type == "ClientHello"
    assert hs.cipher_suites == tuple(SUITES)
    assert hs.server_name == "fw.example.com"
    assert hs.record_version == TlsVersion.TLS1_2
    assert hs.effective_version == TlsVersion.TLS1_2
    assert not hs.incomplete


def test_supported_versions_overrides_legacy():
    (hs,) = hellos([client_record(supported_versions=[0x2A2A, 0x0304, 0x0303])])
    assert hs.record_version == TlsVersion.TLS1_2
    assert hs.effective_version == TlsVersion.TLS1_3


def test_server_hello_with_selected_version():
    server = wrap_records(build_server_hello(0x1302, selected_version=0x0304))
    c, s = hellos([client_record()], [server])
    assert (s.hello_type, s.cipher_suites, s.effective_version) == ("ServerHello", (0x1302,), TlsVersion.TLS1_3)


def test_resolve_version_table():
    assert resolve_version(0x0301, None) == TlsVersion.TLS1_0
    assert resolve_version(0x0300, None) == TlsVersion.SSL3
    assert resolve_version(0x0303, [0x0A0A]) == TlsVersion.Unknown
    assert resolve_version(0x7F00, None) == TlsVersion.Unknown


def test_grease_values():
    grease = [0x0A0A + 0x1010 * i for i in range(16)]
    assert all(is_grease(g) for g in grease)
    assert sum(is_grease(v) for v in range(0x10000)) == 16


def test_truncated_hello_keeps_parsed_suites():
    rec = client_record()
    (hs,) = hellos([rec[:5 + 4 + 2 + 32 + 1 + 2 + 4]])
    assert hs.incomplete
    assert hs.cipher_suites == tuple(SUITES[:2])


def test_non_tls_stream_yields_nothing():
    assert hellos([b"GET / HTTP/1.1\r\n\r\n"]) == []


def test_multiple_records_before_ccs_only():
    rec = client_record()
    ccs = bytes([20, 3, 3, 0, 1, 1])
    assert len(hellos([rec + ccs + rec])) == 1


@pytest.mark.parametrize("cut", [1, 4, 5, 6, 50, 120])
def test_record_level_fragmentation(cut):
    hello = build_client_hello(SUITES, padding_to=200)
    (hs,) = hellos([wrap_records(hello, split_at=[cut])])
    assert hs.cipher_suites == tuple(SUITES) and not hs.incomplete


def test_padding_produces_exact_record_size():
    assert len(wrap_records(build_client_hello(SUITES, padding_to=200))) == 200
