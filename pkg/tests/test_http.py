import gzip
import hashlib
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tcp_conn, udp_packet
from iotupdate.flows import group_udp, pair_streams, reassemble_tcp
from iotupdate.httpstream import (BODY_TRUNCATED, CLOSE_FRAMED, DECODE_FAILED, PARSE_TRUNCATED, SSDP_UDP,
                                  HttpResponse, ObjectStore, decode_body, parse_datagram, parse_http,
                                  parse_ssdp)


def txns_of(c2s, s2c, **kw):
    out = []
    for client, server in pair_streams(reassemble_tcp(tcp_conn(c2s, s2c, **kw))):
        out += parse_http(client, server, "cap")
    return out


def test_content_length_pipelined_fifo():
    req = b"GET /a HTTP/1.1\r\nHost: x\r\n\r\nGET /b HTTP/1.1\r\nHost: x\r\n\r\n"
    resp = (b"HTTP/1.1 200 OK\r\nContent-Length: 3\r\n\r\none"
            b"HTTP/1.1 404 Not Found\r\nContent-Length: 4\r\n\r\nnope")
    t1, t2 = txns_of([req], [resp])
    assert (t1.request.uri, t1.response.status_code, t1.response.body) == ("/a", 200, b"one")
    assert (t2.request.uri, t2.response.status_code, t2.response.reason, t2.response.body) == \
        ("/b", 404, "Not Found", b"nope")
    assert t1.response.declared_length == 3


def test_chunked_body_with_extensions_and_trailers():
    resp = (b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n"
            b"4;ext=1\r\nWiki\r\n5\r\npedia\r\n0\r\nX-Trailer: y\r\n\r\n")
    (t,) = txns_of([b"GET / HTTP/1.1\r\n\r\n"], [resp])
    assert t.response.body == b"Wikipedia"
    assert not t.flags


def test_close_delimited_body():
    (t,) = txns_of([b"GET / HTTP/1.0\r\n\r\n"], [b"HTTP/1.0 200 OK\r\n\r\nall the rest", b" and more"])
    assert t.response.body == b"all the rest and more"
    assert CLOSE_FRAMED in t.flags


@pytest.mark.parametrize("method,status", [("HEAD", 200), ("GET", 204), ("GET", 304)])
def test_bodiless_responses(method, status):
    req = f"{method} /x HTTP/1.1\r\n\r\nGET /y HTTP/1.1\r\n\r\n".encode()
    resp = (f"HTTP/1.1 {status} X\r\nContent-Length: 10\r\n\r\n".encode()
            + b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok")
    t1, t2 = txns_of([req], [resp])
    assert t1.response.body == b""
    assert t2.response.body == b"ok" and t2.request.uri == "/y"


def test_interim_1xx_is_skipped():
    resp = b"HTTP/1.1 100 Continue\r\n\r\nHTTP/1.1 200 OK\r\nContent-Length: 1\r\n\r\nk"
    (t,) = txns_of([b"POST / HTTP/1.1\r\nContent-Length: 2\r\n\r\nhi"], [resp])
    assert t.request.body == b"hi"
    assert (t.response.status_code, t.response.body) == (200, b"k")


def test_truncated_body_is_flagged():
    (t,) = txns_of([b"GET / HTTP/1.1\r\n\r\n"], [b"HTTP/1.1 200 OK\r\nContent-Length: 100\r\n\r\nshort"])
    assert t.response.body == b"short"
    assert BODY_TRUNCATED in t.flags


def test_unanswered_request_and_header_folding():
    (t,) = txns_of([b"GET / HTTP/1.1\r\nX-Long: a\r\n  b\r\n\r\n"], [])
    assert t.response is None
    assert t.request.header("x-long") == "a b"


def test_midstream_resyncs_to_next_start_line():
    server = [b"ail of an earlier body\r\nHTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok"]
    client = [b"x\r\nGET /next HTTP/1.1\r\n\r\n"]
    txns = txns_of(client, server, handshake=False)
    assert [(t.request.uri, t.response.body) for t in txns] == [("/next", b"ok")]


def test_garbage_after_messages_sets_parse_truncated():
    (t,) = txns_of([b"GET / HTTP/1.1\r\n\r\n"], [b"HTTP/1.1 200 OK\r\nContent-Length: 1\r\n\r\nxNOT HTTP\r\n\r\n"])
    assert PARSE_TRUNCATED in t.flags


def test_ssdp_datagrams_are_standalone_messages():
    notify = b"NOTIFY * HTTP/1.1\r\nHOST: 239.255.255.250:1900\r\nNT: urn:x:service:FirmwareUpdate:1\r\n\r\n"
    reply = b"HTTP/1.1 200 OK\r\nST: upnp:rootdevice\r\n\r\n"
    groups = group_udp([udp_packet(notify, ts=1), udp_packet(reply, src=("192.168.1.31", 1900),
                                                                 dst=("192.168.1.30", 40000), ts=2)])
    txns = parse_ssdp([g for g in groups if g.ssdp_candidate], "cap")
    assert {t.transport for t in txns} == {SSDP_UDP}
    kinds = sorted((t.request is not None, t.response is not None) for t in txns)
    assert kinds == [(False, True), (True, False)]
    assert parse_datagram(b"\x00\x01binary") is None


def test_decode_body_gzip_deflate_and_failure():
    plain = b"firmware image" * 10
    for enc, data in (("gzip", gzip.compress(plain)), ("deflate", zlib.compress(plain)),
                      ("deflate", zlib.compress(plain)[2:-4])):
        msg = HttpResponse(start=("HTTP/1.1", "200", "OK"), headers=[("Content-Encoding", enc)], body=data)
        assert decode_body(msg) == (plain, False)
    bad = HttpResponse(start=("HTTP/1.1", "200", "OK"), headers=[("Content-Encoding", "gzip")], body=b"nope")
    assert decode_body(bad) == (b"nope", True)
    assert DECODE_FAILED in bad.flags


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=2048))
def test_object_store_is_content_addressed(tmp_path_factory, payload):
    root = tmp_path_factory.mktemp("objs")
    objects = ObjectStore(root)
    ref = objects.store(payload, "application/octet-stream")
    assert ref.object_id == hashlib.sha256(payload).hexdigest()
    assert ref.length == len(payload)
    assert objects.load(ref) == payload
    if payload:
        assert ref.path == f"objects/{ref.object_id[:2]}/{ref.object_id}"
        assert (root / ref.path).read_bytes() == payload
        assert objects.store(payload).object_id == ref.object_id
