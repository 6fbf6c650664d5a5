"""Regenerate the bundled cipher catalog from the transcribed IANA registry.

    python tools/build_catalog.py [--snapshot YYYY-MM-DD]

Reads tools/iana_tls_cipher_suites.txt, derives (kex, cipher, mac) from each
suite name, classifies with iotupdate.ciphers.classify_rules and writes
src/iotupdate/data/cipher_catalog.csv.
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from iotupdate.ciphers import classify_rules, components_from_name, is_ephemeral  # noqa: E402

REGISTRY = ROOT / "tools" / "iana_tls_cipher_suites.txt"
CATALOG = ROOT / "src" / "iotupdate" / "data" / "cipher_catalog.csv"


def build(snapshot: str) -> str:
    lines = [
        "# Offline TLS cipher-suite catalog.",
        f"# snapshot: {snapshot}",
        "# source: IANA TLS Cipher Suites registry (tls-parameters-4), names and Recommended column.",
        "# source: classes derived by iotupdate.ciphers.classify_rules; see tools/build_catalog.py.",
        "# code_point_hex,iana_name,class,pfs,kex,cipher,mac,iana_recommended",
    ]
    for raw in REGISTRY.read_text().splitlines():
        if not raw.strip() or raw.startswith("#"):
            continue
        hi, lo, name, rec = raw.split(",")
        code = (int(hi, 16) << 8) | int(lo, 16)
        kex, cipher, mac = components_from_name(name)
        cls = classify_rules(kex, cipher, mac, rec == "Y")
        pfs = int(is_ephemeral(kex) and "EXPORT" not in kex)
        lines.append(f"0x{code:04X},{name},{cls.value},{pfs},{kex},{cipher},{mac},{rec}")
    return "\n".join(lines) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--snapshot", default="2026-10-16")
    ap.add_argument("--out", type=Path, default=CATALOG)
    args = ap.parse_args()
    args.out.write_text(build(args.snapshot))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
