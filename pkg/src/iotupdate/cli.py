"""Command-line entry point: extract, report, catalog-check, fixtures.

Exit codes: 0 success, 1 capture-level errors (or failed checks), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .ciphers import CLASS_ORDER, CatalogError, check_catalog, load_catalog
from .config import ConfigError, load_config

log = logging.getLogger("iotupdate")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
CONFIG_ENV = "IOTUPDATE_CONFIG"


class UsageError(Exception):
    pass


def _synth_error():
    from .fixtures import SynthError
    return SynthError


def _config_path(args) -> str | None:
    return args.config or os.environ.get(CONFIG_ENV) or None


def _progress(done: int, total: int) -> None:
    step = max(1, total // 20)
    if done == total or done % step == 0:
        print(f"[extract] {done}/{total} captures", file=sys.stderr)


def cmd_extract(args) -> int:
    root = Path(args.dataset)
    out = Path(args.out)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist or is not a directory")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if out.resolve() == root.resolve():
        raise UsageError("--out must differ from the dataset root")
    store_path = Path(args.store) if args.store else out / "store.sqlite"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    config = load_config(_config_path(args))
    if args.force and store_path.exists():
        store_path.unlink()
    out.mkdir(parents=True, exist_ok=True)

    from .pipeline import run_extract
    result = run_extract(root, out, store_path, config, workers=args.workers, progress=_progress)
    for cid, err in sorted(result.errors.items()):
        print(f"[extract] error: {cid}: {err}", file=sys.stderr)
    print(f"[extract] {result.captures} captures in {result.seconds:.2f}s "
          f"({result.rate:.1f} captures/s); transactions={result.transactions} "
          f"handshakes={result.handshakes} keyword_hits={result.keyword_hits} evidence={result.evidence}",
          file=sys.stderr)
    summary = {
        "captures": result.captures, "processed": result.processed, "failed": result.failed,
        "packets": result.packets, "transactions": result.transactions, "handshakes": result.handshakes,
        "keyword_hits": result.keyword_hits, "evidence": result.evidence,
        "seconds": round(result.seconds, 3), "captures_per_second": round(result.rate, 2),
        "store": str(store_path), "objects": str(out / "objects"),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_PARTIAL if result.failed else EXIT_OK


def cmd_report(args) -> int:
    from .analysis import write_reports
    from .store import open_store

    store_path = Path(args.store)
    if not store_path.is_file():
        raise UsageError(f"no store at {store_path}")
    catalog = load_catalog(args.catalog)
    with open_store(store_path, "read") as store:
        paths = write_reports(store, args.out, catalog, args.format)
    for p in paths:
        print(f"[report] wrote {p}", file=sys.stderr)
    print(json.dumps({"files": [str(p) for p in paths]}))
    return EXIT_OK


def cmd_catalog_check(args) -> int:
    try:
        catalog = load_catalog(args.file)
    except FileNotFoundError as exc:
        raise UsageError(f"catalog not found: {exc.filename}") from None
    except CatalogError as exc:
        print(f"catalog-check: INVALID: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    counts = catalog.class_counts()
    for cls in CLASS_ORDER:
        print(f"{cls}\t{counts[cls]}")
    pfs = sum(1 for r in catalog.records.values() if r.pfs)
    rec_flag = sum(1 for r in catalog.records.values() if r.iana_recommended)
    print(f"total\t{len(catalog.records)}")
    print(f"pfs\t{pfs}")
    print(f"iana_recommended_flag\t{rec_flag}")
    print(f"snapshot\t{catalog.snapshot_date or 'unknown'}")
    problems = check_catalog(catalog)
    for p in problems:
        print(f"catalog-check: violation: {p}", file=sys.stderr)
    if problems:
        return EXIT_PARTIAL
    print("catalog-check: OK", file=sys.stderr)
    return EXIT_OK


def cmd_fixtures_synth(args) -> int:
    from .fixtures import load_scenarios, write_corpus

    scenarios = load_scenarios(args.scenario or None)
    written = write_corpus(scenarios, args.out, args.manifests)
    for p in written:
        print(f"[fixtures] wrote {p}", file=sys.stderr)
    return EXIT_OK


def cmd_fixtures_verify(args) -> int:
    from .fixtures import verify_all

    results = verify_all(args.store, args.manifests, names=args.scenario or None)
    failed = 0
    for res in results:
        print(res.line())
        failed += not res.ok
    return EXIT_PARTIAL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotupdate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run the extraction pipeline over a dataset tree")
    p.add_argument("dataset", help="dataset root directory")
    p.add_argument("--out", required=True, help="output directory (objects/ and the default store)")
    p.add_argument("--store", help="store path (default: OUT/store.sqlite)")
    p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--config", help=f"INI config file (default: ${CONFIG_ENV} or built-in)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("report", help="write matrices, histograms and device reports from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--format", choices=("csv", "json", "all"), default="all")
    p.add_argument("--catalog", help="cipher catalog file (default: bundled snapshot)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("catalog-check", help="validate a cipher catalog file")
    p.add_argument("file", nargs="?", help="catalog file (default: bundled snapshot)")
    p.set_defaults(func=cmd_catalog_check)

    p = sub.add_parser("fixtures", help="synthetic scenario corpus")
    fsub = p.add_subparsers(dest="fixtures_command", required=True)
    s = fsub.add_parser("synth", help="generate scenario pcaps and manifests")
    s.add_argument("--out", required=True, help="corpus root for pcaps")
    s.add_argument("--manifests", required=True, help="directory for expectation manifests")
    s.add_argument("--scenario", action="append", help="only this scenario (repeatable)")
    s.set_defaults(func=cmd_fixtures_synth)
    v = fsub.add_parser("verify", help="compare a store against scenario manifests")
    v.add_argument("--store", required=True)
    v.add_argument("--manifests", required=True)
    v.add_argument("--scenario", action="append", help="only this scenario (repeatable)")
    v.set_defaults(func=cmd_fixtures_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"iotupdate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _synth_error() as exc:
        print(f"iotupdate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"iotupdate {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
