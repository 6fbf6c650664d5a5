from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DATA
from iotupdate.ciphers import (CLASS_ORDER, KEX_TOKENS, UNKNOWN, CatalogError, CipherClass, bucket, check_catalog,
                               classify_rules, components_from_name, is_ephemeral, load_catalog, parse_catalog)

CATALOG = load_catalog()
CORRUPTED = sorted(DATA.glob("catalog_*.csv"))

# Class of individual suites worked out by hand from the suite names.
HAND_CLASSES = {
    0x0000: "Insecure",     # NULL everything
    0x0004: "Insecure",     # RC4 + MD5
    0x0018: "Insecure",     # anonymous DH
    0x000A: "Weak",         # 3DES
    0x002F: "Weak",         # static RSA, CBC-SHA1
    0x009C: "Weak",         # static RSA even with GCM
    0xC013: "Weak",         # ephemeral, but CBC with SHA-1
    0xC027: "Secure",       # ephemeral, CBC with SHA-256, not registry-recommended
    0x1305: "Secure",       # TLS 1.3 CCM_8, not registry-recommended
    0x009E: "Recommended",
    0xC02B: "Recommended",
    0xC02F: "Recommended",
    0xCCA9: "Recommended",
    0x1301: "Recommended",
    0x1302: "Recommended",
    0x1303: "Recommended",
}


def test_bundled_catalog_frozen_counts():
    assert len(CATALOG.records) == 350
    assert CATALOG.class_counts() == {"Insecure": 83, "Weak": 163, "Secure": 80, "Recommended": 24}
    assert CATALOG.snapshot_date


@pytest.mark.parametrize("code,cls", sorted(HAND_CLASSES.items()))
def test_hand_classified_suites(code, cls):
    assert CATALOG.records[code].cls.value == cls


def test_catalog_is_partition_and_recommended_implies_pfs():
    seen = set()
    for cls in CLASS_ORDER:
        members = {cp for cp, r in CATALOG.records.items() if r.cls.value == cls}
        assert not members & seen
        seen |= members
    assert seen == set(CATALOG.records)
    for r in CATALOG.records.values():
        if r.cls is CipherClass.Recommended:
            assert r.pfs
    assert check_catalog(CATALOG) == []


def test_rows_agree_with_rules_and_names():
    for r in CATALOG.records.values():
        assert components_from_name(r.iana_name) == (r.kex, r.cipher, r.mac_or_aead)
        # export-grade ephemeral exchanges are too short to count as forward secret
        assert r.pfs == (is_ephemeral(r.kex) and "EXPORT" not in r.kex)
        assert classify_rules(r.kex, r.cipher, r.mac_or_aead, bool(r.iana_recommended)) is r.cls


def test_bucket_excludes_grease_and_signalling():
    assert bucket(CATALOG, 0x1A1A) is None
    assert bucket(CATALOG, 0x00FF) is None
    assert bucket(CATALOG, 0x5600) is None
    assert bucket(CATALOG, 0xFEFE) == UNKNOWN
    assert bucket(CATALOG, 0x0004) == "Insecure"


@pytest.mark.parametrize("path", CORRUPTED, ids=lambda p: p.stem)
def test_corrupted_variants_are_rejected(path: Path):
    with pytest.raises(CatalogError):
        load_catalog(path)


def test_three_corrupted_variants_committed():
    assert len(CORRUPTED) == 3


def test_misclassified_row_is_reported_by_check():
    text = "0x0004,TLS_RSA_WITH_RC4_128_MD5,Weak,0,RSA,RC4_128,MD5,N\n"
    problems = check_catalog(parse_catalog(text))
    assert len(problems) == 1 and "rules give Insecure" in problems[0]


def test_empty_or_malformed_catalog():
    with pytest.raises(CatalogError):
        parse_catalog("# nothing\n")
    with pytest.raises(CatalogError):
        parse_catalog("0xZZ,TLS_X,Weak,0,RSA,NULL,SHA\n")


CIPHERS = ["NULL", "RC4_128", "DES_CBC", "3DES_EDE_CBC", "AES_128_CBC", "AES_256_GCM", "CHACHA20_POLY1305"]
MACS = ["NULL", "MD5", "SHA", "SHA256", "AEAD"]


@given(kex=st.sampled_from(sorted(KEX_TOKENS)), cipher=st.sampled_from(CIPHERS), mac=st.sampled_from(MACS),
       rec=st.booleans())
def test_rule_invariants(kex, cipher, mac, rec):
    cls = classify_rules(kex, cipher, mac, rec)
    if cls is CipherClass.Recommended:
        assert rec and is_ephemeral(kex)
    if cipher in ("NULL", "RC4_128", "DES_CBC") or mac == "MD5":
        assert cls is CipherClass.Insecure
    # the registry flag can only promote, never demote
    order = CLASS_ORDER.index
    assert order(classify_rules(kex, cipher, mac, True).value) >= order(classify_rules(kex, cipher, mac, False).value)
