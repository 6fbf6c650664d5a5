"""Update-traffic detection over parsed HTTP/SSDP transactions.

Keyword hits are counted per transaction and per location. Evidence rows add
a typed layer on top (firmware URLs, version strings, UPnP update services,
signature fields, firmware-sized payloads) so reports can separate keyword
chatter from concrete update machinery.
"""

from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass
from urllib.parse import urlsplit

from .config import DetectorConfig
from .httpstream import SSDP_UDP, HttpMessage, HttpTransaction, decode_body, ssdp_message_bytes

# Scan locations.
REQUEST_URI = "RequestUri"
REQUEST_HEADERS = "RequestHeaders"
REQUEST_BODY = "RequestBody"
RESPONSE_HEADERS = "ResponseHeaders"
RESPONSE_BODY = "ResponseBody"
SSDP_MESSAGE = "SsdpMessage"
LOCATIONS = (REQUEST_URI, REQUEST_HEADERS, REQUEST_BODY, RESPONSE_HEADERS, RESPONSE_BODY, SSDP_MESSAGE)

# Evidence kinds.
KEYWORD_FLAG = "KeywordFlag"
FIRMWARE_URL = "FirmwareUrl"
VERSION_ADVERTISEMENT = "VersionAdvertisement"
UPDATE_SERVICE = "UpdateService"
SIGNATURE_FIELD = "SignatureField"
FIRMWARE_PAYLOAD = "FirmwarePayload"
EVIDENCE_KINDS = (KEYWORD_FLAG, FIRMWARE_URL, VERSION_ADVERTISEMENT, UPDATE_SERVICE, SIGNATURE_FIELD, FIRMWARE_PAYLOAD)
PLAINTEXT_UPDATE_KINDS = (KEYWORD_FLAG, FIRMWARE_URL, UPDATE_SERVICE, FIRMWARE_PAYLOAD)

URL_RE = re.compile(r"https?://[^\s\"'<>\\]+", re.IGNORECASE)
URL_TRAILING = ".,;:)]}"
CONTAINER_MAGIC = (
    ("zip", b"PK\x03\x04"),
    ("squashfs", b"hsqs"),
    ("squashfs", b"sqsh"),
    ("uImage", b"\x27\x05\x19\x56"),
    ("gzip", b"\x1f\x8b"),
)
_WORD_RE = re.compile(r"[A-Z]?[a-z]+|[A-Z]+(?![a-z])|\d+")


@dataclass(frozen=True)
class KeywordHit:
    capture_id: str
    transaction_ref: str
    keyword: str
    count: int
    location: str
    raw_count: int


@dataclass(frozen=True)
class UpdateEvidence:
    device_name: str
    kind: str
    detail: str
    transport_plaintext: bool
    transaction_ref: str


def scan_keywords(content: bytes, corpus) -> list[tuple[str, int]]:
    """Case-insensitive substring counts, in corpus order, zero counts omitted.

    Occurrences of one keyword do not overlap each other; different keywords
    are counted independently. Only ASCII letters are case-folded, so binary
    content is scanned the same way as text.
    """
    if not content:
        return []
    folded = content.lower()
    out = []
    for kw in corpus:
        n = folded.count(kw.encode("ascii"))
        if n:
            out.append((kw, n))
    return out


def flag_capture(hits) -> bool:
    return sum(h.count for h in hits) > 0


# -- per-transaction content ---------------------------------------------------

@dataclass
class TxnView:
    """Decoded scan surfaces of one transaction, computed once."""

    txn: HttpTransaction
    ref: str
    surfaces: list[tuple[str, bytes, bytes]]  # (location, decoded, raw)
    flagged: bool = False

    def text(self, location: str | None = None) -> str:
        parts = [dec for loc, dec, _ in self.surfaces if location is None or loc == location]
        return "\n".join(p.decode("latin-1") for p in parts)


def transaction_surfaces(txn: HttpTransaction) -> list[tuple[str, bytes, bytes]]:
    if txn.transport == SSDP_UDP:
        msg = ssdp_message_bytes(txn)
        return [(SSDP_MESSAGE, msg, msg)]
    out = []
    if txn.request is not None:
        uri = txn.request.uri.encode("latin-1")
        head = txn.request.header_text()
        out += [(REQUEST_URI, uri, uri), (REQUEST_HEADERS, head, head)]
        out.append((REQUEST_BODY, decode_body(txn.request)[0], txn.request.body))
    if txn.response is not None:
        head = txn.response.header_text()
        out.append((RESPONSE_HEADERS, head, head))
        out.append((RESPONSE_BODY, decode_body(txn.response)[0], txn.response.body))
    return out


def scan_transaction(view: TxnView, corpus, capture_id: str = "") -> list[KeywordHit]:
    hits = []
    for location, decoded, raw in view.surfaces:
        counts = dict(scan_keywords(decoded, corpus))
        raw_counts = dict(scan_keywords(raw, corpus)) if raw is not decoded else counts
        for kw in corpus:
            if counts.get(kw):
                hits.append(KeywordHit(capture_id, view.ref, kw, counts.get(kw, 0), location, raw_counts.get(kw, 0)))
    view.flagged = bool(hits)
    return hits


# -- evidence ------------------------------------------------------------------

def _key_words(name: str) -> list[str]:
    return [w.lower() for w in _WORD_RE.findall(name)]


def key_matches(name: str, tokens) -> bool:
    """True if a camelCase/snake_case/kebab-case key has a word equal to a token,
    or (for tokens longer than two letters) a word that starts with one."""
    for word in _key_words(name):
        for tok in tokens:
            if word == tok or (len(tok) > 2 and word.startswith(tok)):
                return True
    return False


def _unique(items):
    seen = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def detect_firmware_url(view: TxnView, cfg: DetectorConfig) -> list[tuple[str, bool]]:
    """Absolute update URLs in headers and bodies as (url, plaintext)."""
    text = "\n".join(dec.decode("latin-1") for loc, dec, _ in view.surfaces if loc != REQUEST_URI)
    text = text.replace("\\/", "/")
    found = []
    for m in URL_RE.finditer(text):
        url = m.group(0).rstrip(URL_TRAILING)
        parts = urlsplit(url)
        if not parts.netloc:
            continue
        path = parts.path.lower()
        lowered = url.lower()
        if path.endswith(tuple(cfg.firmware_extensions)) or any(kw in lowered for kw in cfg.keywords):
            found.append((url, parts.scheme.lower() == "http"))
    return _unique(found)


def _version_patterns(cfg: DetectorConfig) -> tuple[re.Pattern, re.Pattern]:
    ver = rf"v?({cfg.version_regex})(?![\d.]*\d)"
    kv = re.compile(rf"([A-Za-z][\w.-]*)[\"']?\s*[:=]\s*[\"']?{ver}")
    xml = re.compile(rf"<([A-Za-z][\w.:-]*)[^<>]*>\s*{ver}\s*</")
    return kv, xml


def detect_version_advertisement(view: TxnView, cfg: DetectorConfig) -> list[str]:
    """Version strings next to a firmware/fw/sw key (query, header, JSON or XML)."""
    kv, xml = _version_patterns(cfg)
    out = []
    for _, decoded, _ in view.surfaces:
        text = decoded.decode("latin-1")
        hits = []
        for pat in (kv, xml):
            for m in pat.finditer(text):
                key = m.group(1).rsplit(":", 1)[-1]
                if key_matches(key, cfg.version_key_tokens):
                    hits.append((m.start(), m.group(2)))
        out += [v for _, v in sorted(hits)]
    return _unique(out)


_XML_TAG = re.compile(r"<([A-Za-z][\w.:-]*)")
_SERVICE_BLOCK = re.compile(r"<service>(.*?)</service>", re.S | re.I)
_ACTION_NAME = re.compile(r"<action>\s*<name>\s*([^<\s]+)\s*</name>", re.I)


def _xml_value(block: str, tag: str) -> str | None:
    m = re.search(rf"<{tag}>\s*([^<]*?)\s*</{tag}>", block, re.I)
    return m.group(1) if m else None


def service_control_map(views: list[TxnView]) -> dict[str, str]:
    """SCPDURL path -> controlURL, from device descriptions in a capture."""
    mapping = {}
    for view in views:
        for block in _SERVICE_BLOCK.findall(view.text(RESPONSE_BODY)):
            scpd = _xml_value(block, "SCPDURL")
            control = _xml_value(block, "controlURL")
            if scpd and control:
                mapping[urlsplit(scpd).path] = control
    return mapping


def detect_update_service(view: TxnView, cfg: DetectorConfig, control_map: dict[str, str]) -> list[str]:
    """UPnP services/actions whose names carry an update token."""
    tokens = cfg.service_tokens

    def hit(name: str) -> bool:
        return any(tok in name.lower() for tok in tokens)

    out = []
    txn = view.txn
    if txn.transport == SSDP_UDP:
        msg = txn.request or txn.response
        for header in ("NT", "ST", "USN"):
            value = msg.header(header)
            if value and hit(value):
                out.append(value)
    else:
        if txn.request is not None:
            soap = txn.request.header("SOAPACTION")
            if soap:
                action = soap.strip('"').rpartition("#")[2]
                if hit(action):
                    out.append(f"{action} @ {txn.request.uri}")
        body = view.text(RESPONSE_BODY)
        for block in _SERVICE_BLOCK.findall(body):
            stype = _xml_value(block, "serviceType")
            if stype and hit(stype):
                control = _xml_value(block, "controlURL")
                out.append(f"{stype} @ {control}" if control else stype)
        control = None
        if txn.request is not None:
            control = control_map.get(urlsplit(txn.request.uri).path)
        for action in _ACTION_NAME.findall(body):
            if hit(action):
                out.append(f"{action} @ {control}" if control else action)
    return _unique(out)


def _json_keys(obj, out: list[str]) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.append(str(k))
            _json_keys(v, out)
    elif isinstance(obj, list):
        for v in obj:
            _json_keys(v, out)


def structured_keys(msg: HttpMessage, body: bytes) -> list[str]:
    """Field names of a message: header names, JSON keys, XML tags, plist keys."""
    keys = [name for name, _ in msg.headers]
    text = body.decode("utf-8", "replace")
    stripped = text.lstrip()
    if stripped[:1] in ("{", "["):
        try:
            _json_keys(json.loads(stripped), keys)
        except ValueError:
            keys += re.findall(r"\"([^\"\\]{1,64})\"\s*:", text)
    elif stripped[:1] == "<":
        plist = re.findall(r"<key>\s*([^<]+?)\s*</key>", text)
        keys += plist
        keys += [t.rsplit(":", 1)[-1] for t in _XML_TAG.findall(text) if t.lower() != "key"]
    return keys


def detect_signature_fields(view: TxnView, cfg: DetectorConfig) -> list[str]:
    """Signature/certificate-style field names, only in update-flagged transactions."""
    if not view.flagged:
        return []
    txn = view.txn
    out = []
    for msg in (txn.request, txn.response):
        if msg is None:
            continue
        body = decode_body(msg)[0]
        out += [k for k in structured_keys(msg, body) if key_matches(k, cfg.signature_tokens)]
    return _unique(out)


def container_magic(body: bytes) -> str | None:
    for name, magic in CONTAINER_MAGIC:
        if body.startswith(magic):
            return name
    return None


def detect_firmware_payload(view: TxnView, cfg: DetectorConfig) -> str | None:
    """Detail string for a firmware-sized response body, or None."""
    resp = view.txn.response
    if resp is None:
        return None
    size = len(resp.body)
    if size < cfg.payload_threshold:
        return None
    ctype = resp.content_type
    if any(fnmatch.fnmatchcase(ctype, pat) for pat in cfg.payload_denied_types):
        return None
    magic = container_magic(resp.body)
    if ctype not in cfg.payload_content_types and magic is None:
        return None
    return f"{ctype};length={size}" + (f";magic={magic}" if magic else "")


def analyze_transactions(txns: list[tuple[str, HttpTransaction]], cfg: DetectorConfig, device: str,
                         capture_id: str = "") -> tuple[list[KeywordHit], list[UpdateEvidence]]:
    """Keyword hits and evidence for one capture's (ref, transaction) list."""
    views = [TxnView(txn, ref, transaction_surfaces(txn)) for ref, txn in txns]
    hits: list[KeywordHit] = []
    for view in views:
        hits += scan_transaction(view, cfg.keywords, capture_id)
    control_map = service_control_map(views)

    evidence: list[UpdateEvidence] = []
    for view in views:
        def add(kind: str, detail: str, plaintext: bool = True) -> None:
            evidence.append(UpdateEvidence(device, kind, detail, plaintext, view.ref))

        if view.flagged:
            kws = sorted({h.keyword for h in hits if h.transaction_ref == view.ref and h.count})
            add(KEYWORD_FLAG, ",".join(kws))
        for url, plaintext in detect_firmware_url(view, cfg):
            add(FIRMWARE_URL, url, plaintext)
        for version in detect_version_advertisement(view, cfg):
            add(VERSION_ADVERTISEMENT, version)
        for service in detect_update_service(view, cfg, control_map):
            add(UPDATE_SERVICE, service)
        for name in detect_signature_fields(view, cfg):
            add(SIGNATURE_FIELD, name)
        payload = detect_firmware_payload(view, cfg)
        if payload:
            add(FIRMWARE_PAYLOAD, payload)
    return hits, evidence
