"""Cipher-suite catalog: IANA names and a four-way security classification.

Catalog file format (one suite per line, ``#`` starts a comment)::

    code_point_hex,iana_name,class,pfs,kex,cipher,mac[,iana_recommended]

``class`` is one of Insecure/Weak/Secure/Recommended, ``pfs`` is 0 or 1
(``pfs=1`` is also accepted) and the optional trailing column is the IANA
registry's Recommended flag, Y or N. A ``# snapshot: YYYY-MM-DD`` comment
sets the snapshot date and ``# source: ...`` lines form the source note.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .tls import is_grease


class CipherClass(str, enum.Enum):
    Insecure = "Insecure"
    Weak = "Weak"
    Secure = "Secure"
    Recommended = "Recommended"


UNKNOWN = "Unknown"
CLASS_ORDER = [c.value for c in CipherClass]

# Signalling values carried in the cipher list that are not suites.
SIGNALLING = {0x00FF: "TLS_EMPTY_RENEGOTIATION_INFO_SCSV", 0x5600: "TLS_FALLBACK_SCSV"}

KEX_TOKENS = {
    "NULL", "RSA", "RSA_EXPORT", "DH_DSS", "DH_RSA", "DH_DSS_EXPORT", "DH_RSA_EXPORT",
    "DHE_DSS", "DHE_RSA", "DHE_DSS_EXPORT", "DHE_RSA_EXPORT", "DH_anon", "DH_anon_EXPORT",
    "KRB5", "KRB5_EXPORT", "PSK", "DHE_PSK", "RSA_PSK", "ECDH_ECDSA", "ECDHE_ECDSA",
    "ECDH_RSA", "ECDHE_RSA", "ECDH_anon", "ECDHE_PSK", "SRP_SHA", "SRP_SHA_RSA",
    "SRP_SHA_DSS", "PSK_DHE", "ECCPWD", "GOSTR341112_256", "ANY",
}
CIPHER_PATTERN = re.compile(
    r"NULL|RC4_(40|128)|RC2_CBC_40|DES40_CBC|DES_CBC(_40)?|3DES_EDE_CBC|IDEA_CBC|SEED_CBC"
    r"|(AES|CAMELLIA|ARIA)_(128|256)_(CBC|GCM)|AES_(128|256)_CCM(_8)?|CHACHA20_POLY1305"
    r"|SM4_(GCM|CCM)|AEGIS_(256|128L)|(KUZNYECHIK|MAGMA)_(CTR|MGM_L|MGM_S)|28147_CNT"
)
MAC_TOKENS = {"NULL", "MD5", "SHA", "SHA256", "SHA384", "SHA512", "SM3", "OMAC", "IMIT", "AEAD"}
HASH_SUFFIXES = ("SHA", "SHA256", "SHA384", "SHA512", "MD5", "NULL", "SM3")


class CatalogError(ValueError):
    pass


class ClassificationError(ValueError):
    pass


@dataclass(frozen=True)
class CipherSuiteRecord:
    code_point: int
    iana_name: str
    cls: CipherClass
    pfs: bool
    kex: str
    cipher: str
    mac_or_aead: str
    iana_recommended: bool | None = None

    def __post_init__(self):
        if self.cls is CipherClass.Recommended and not self.pfs:
            raise CatalogError(f"{self.iana_name}: Recommended requires pfs=1")


@dataclass
class CipherCatalog:
    records: dict[int, CipherSuiteRecord]
    snapshot_date: str = ""
    source_note: str = ""

    def class_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in CLASS_ORDER}
        for rec in self.records.values():
            counts[rec.cls.value] += 1
        return counts


def is_ephemeral(kex: str) -> bool:
    return kex.startswith(("DHE", "ECDHE", "SRP")) or kex in ("PSK_DHE", "ECCPWD", "ANY")


def classify_rules(kex: str, cipher: str, mac_or_aead: str, iana_recommended: bool = False) -> CipherClass:
    """Classify a suite from its components.

    Insecure: anonymous or null key exchange, export grade, NULL/RC4/RC2/DES
    ciphers, or MD5 MACs. Weak: static key exchange, 3DES, or CBC with
    SHA-1. Everything else is Secure, promoted to Recommended when the
    exchange is ephemeral and the registry recommends the suite.
    """
    if kex not in KEX_TOKENS:
        raise ClassificationError(f"unrecognised key exchange {kex!r}")
    if not CIPHER_PATTERN.fullmatch(cipher):
        raise ClassificationError(f"unrecognised cipher {cipher!r}")
    if mac_or_aead not in MAC_TOKENS:
        raise ClassificationError(f"unrecognised mac {mac_or_aead!r}")

    if (
        kex == "NULL" or "anon" in kex or "EXPORT" in kex
        or cipher == "NULL" or cipher.startswith(("RC4", "RC2", "DES"))
        or mac_or_aead == "MD5"
    ):
        return CipherClass.Insecure
    pfs = is_ephemeral(kex)
    if not pfs or cipher.startswith("3DES") or (cipher.endswith("_CBC") and mac_or_aead == "SHA"):
        return CipherClass.Weak
    if pfs and iana_recommended:
        return CipherClass.Recommended
    return CipherClass.Secure


def components_from_name(name: str) -> tuple[str, str, str]:
    """Split an IANA suite name into (kex, cipher, mac_or_aead)."""
    if not name.startswith("TLS_"):
        raise ClassificationError(f"not a TLS suite name: {name}")
    rest = name[4:]
    if "_WITH_" in rest:
        kex, tail = rest.split("_WITH_", 1)
    else:
        kex, tail = "ANY", rest
    if tail in ("SHA256_SHA256", "SHA384_SHA384"):
        return kex, "NULL", tail.split("_")[0]
    head, _, last = tail.rpartition("_")
    if last in ("OMAC", "IMIT") or (last in HASH_SUFFIXES and head):
        cipher, mac = head, last
    else:
        cipher, mac = tail, "AEAD"
    if "_MGM_" in cipher:
        kex = "ANY"  # TLS 1.3 GOST suites
    return kex, cipher, mac


def _parse_row(line: str, lineno: int) -> CipherSuiteRecord:
    cols = [c.strip() for c in line.split(",")]
    if len(cols) not in (7, 8):
        raise CatalogError(f"line {lineno}: expected 7 or 8 columns, got {len(cols)}")
    code_s, name, cls_s, pfs_s, kex, cipher, mac = cols[:7]
    try:
        code = int(code_s, 16)
    except ValueError:
        raise CatalogError(f"line {lineno}: bad code point {code_s!r}")
    if not 0 <= code <= 0xFFFF:
        raise CatalogError(f"line {lineno}: code point out of range {code_s!r}")
    try:
        cls = CipherClass(cls_s)
    except ValueError:
        raise CatalogError(f"line {lineno}: unknown class {cls_s!r}")
    pfs_s = pfs_s.removeprefix("pfs=")
    if pfs_s not in ("0", "1"):
        raise CatalogError(f"line {lineno}: pfs must be 0 or 1, got {pfs_s!r}")
    rec_flag = None
    if len(cols) == 8:
        if cols[7] not in ("Y", "N"):
            raise CatalogError(f"line {lineno}: recommended flag must be Y or N")
        rec_flag = cols[7] == "Y"
    try:
        return CipherSuiteRecord(code, name, cls, pfs_s == "1", kex, cipher, mac, rec_flag)
    except CatalogError as exc:
        raise CatalogError(f"line {lineno}: {exc}") from None


def parse_catalog(text: str) -> CipherCatalog:
    records: dict[int, CipherSuiteRecord] = {}
    snapshot = ""
    notes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("snapshot:"):
                snapshot = body.split(":", 1)[1].strip()
            elif body.startswith("source:"):
                notes.append(body.split(":", 1)[1].strip())
            continue
        rec = _parse_row(line, lineno)
        if rec.code_point in records:
            raise CatalogError(f"line {lineno}: duplicate code point 0x{rec.code_point:04X}")
        records[rec.code_point] = rec
    if not records:
        raise CatalogError("catalog has no rows")
    return CipherCatalog(dict(sorted(records.items())), snapshot, " ".join(notes))


def load_catalog(path: str | Path | None = None) -> CipherCatalog:
    """Load and validate a catalog file; the bundled snapshot when ``path`` is None."""
    if path is None:
        text = resources.files("iotupdate.data").joinpath("cipher_catalog.csv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_catalog(text)


def lookup(catalog: CipherCatalog, code_point: int) -> CipherSuiteRecord | None:
    """Exact catalog match, or None for code points the catalog does not know."""
    return catalog.records.get(code_point)


def bucket(catalog: CipherCatalog, code_point: int) -> str | None:
    """Histogram bucket of one offered/selected code point.

    None for GREASE and signalling values (excluded from counts), the class
    name for catalogued suites, and "Unknown" otherwise.
    """
    if is_grease(code_point) or code_point in SIGNALLING:
        return None
    rec = catalog.records.get(code_point)
    return rec.cls.value if rec else UNKNOWN


def check_catalog(catalog: CipherCatalog) -> list[str]:
    """Consistency problems in an already-loaded catalog (empty when clean)."""
    problems = []
    for rec in catalog.records.values():
        if rec.cls is CipherClass.Recommended and not rec.pfs:
            problems.append(f"0x{rec.code_point:04X} {rec.iana_name}: Recommended without PFS")
        if rec.iana_recommended is not None:
            try:
                expected = classify_rules(rec.kex, rec.cipher, rec.mac_or_aead, rec.iana_recommended)
            except ClassificationError as exc:
                problems.append(f"0x{rec.code_point:04X} {rec.iana_name}: {exc}")
                continue
            if expected is not rec.cls:
                problems.append(
                    f"0x{rec.code_point:04X} {rec.iana_name}: class {rec.cls.value} but rules give {expected.value}"
                )
    return problems
