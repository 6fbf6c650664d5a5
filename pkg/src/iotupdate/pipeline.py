"""Per-capture extraction and the parallel extract driver.

Workers turn one capture file into a :class:`CaptureBundle` (HTTP bodies are
written straight into the content-addressed object store, which is safe to
share). The parent process is the only writer of the metadata store.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .ciphers import load_catalog
from .config import Config
from .detector import analyze_transactions
from .flows import group_udp, pair_streams, reassemble_tcp
from .httpstream import BODY_UNAVAILABLE, HttpMessage, HttpTransaction, ObjectStore, parse_http, parse_ssdp
from .ingest import CaptureMeta, partition_work, scan_dataset
from .packets import CaptureFormatError, decode_capture
from .store import CaptureBundle, headers_json, open_store
from .tls import extract_handshakes

log = logging.getLogger(__name__)


@dataclass
class ExtractResult:
    captures: int = 0
    processed: int = 0
    failed: int = 0
    errors: dict[str, str] = field(default_factory=dict)
    transactions: int = 0
    handshakes: int = 0
    keyword_hits: int = 0
    evidence: int = 0
    packets: int = 0
    seconds: float = 0.0

    @property
    def rate(self) -> float:
        return self.captures / self.seconds if self.seconds > 0 else 0.0


def _store_body(objects: ObjectStore, msg: HttpMessage | None, errors: list[str]) -> None:
    if msg is None or msg.body_ref is not None:
        return
    try:
        msg.body_ref = objects.store(msg.body, msg.content_type)
    except OSError as exc:
        msg.flags.add(BODY_UNAVAILABLE)
        errors.append(f"object store write failed: {exc}")


def _txn_row(txn_id: str, capture_id: str, txn: HttpTransaction) -> dict:
    req, resp = txn.request, txn.response
    flow = txn.flow

    def ref(msg, attr):
        if msg is None or msg.body_ref is None:
            return None
        return getattr(msg.body_ref, attr)

    return {
        "txn_id": txn_id,
        "capture_id": capture_id,
        "flow_id": flow.flow_id(),
        "client_addr": flow.src_addr,
        "client_port": flow.src_port,
        "server_addr": flow.dst_addr,
        "server_port": flow.dst_port,
        "transport": txn.transport,
        "method": req.method if req else None,
        "uri": req.uri if req else None,
        "request_version": req.version if req else None,
        "request_headers": headers_json(req.headers) if req else None,
        "request_ts": req.ts if req else None,
        "request_body_id": ref(req, "object_id") if req and req.body else None,
        "request_body_length": len(req.body) if req else None,
        "request_content_type": req.content_type if req else None,
        "status_code": resp.status_code if resp else None,
        "reason": resp.reason if resp else None,
        "response_version": resp.version if resp else None,
        "response_headers": headers_json(resp.headers) if resp else None,
        "response_ts": resp.ts if resp else None,
        "response_body_id": ref(resp, "object_id") if resp and resp.body else None,
        "response_body_length": len(resp.body) if resp else None,
        "response_content_type": resp.content_type if resp else None,
        "declared_length": resp.declared_length if resp else None,
        "flags": ",".join(sorted(txn.flags)),
    }


def process_capture(meta: CaptureMeta, root: str | os.PathLike, out_dir: str | os.PathLike,
                    config: Config) -> CaptureBundle:
    """Run flows -> http -> tls -> detector over one capture file."""
    cid = meta.capture_id
    path = Path(root) / cid
    try:
        data = path.read_bytes()
        decoded = decode_capture(data)
    except (OSError, CaptureFormatError) as exc:
        log.warning("%s: %s", cid, exc)
        return CaptureBundle(meta=meta, status="failed", error=f"{type(exc).__name__}: {exc}")
    meta = meta.with_packet_count(decoded.packet_count)
    for warning in decoded.warnings:
        log.warning("%s: %s", cid, warning)

    streams = reassemble_tcp(decoded.packets)
    txns: list[HttpTransaction] = []
    for client, server in pair_streams(streams):
        txns += parse_http(client, server, cid)
    txns += parse_ssdp([g for g in group_udp(decoded.packets) if g.ssdp_candidate], cid)

    errors: list[str] = []
    objects = ObjectStore(out_dir)
    for txn in txns:
        _store_body(objects, txn.request, errors)
        _store_body(objects, txn.response, errors)
    refs = [(f"{cid}/t{i:05d}", txn) for i, txn in enumerate(txns)]
    txn_rows = [_txn_row(ref, cid, txn) for ref, txn in refs]

    hs_rows = []
    n = 0
    for stream in streams:
        for hs in extract_handshakes(stream, cid):
            hs_rows.append({
                "hs_id": f"{cid}/h{n:05d}",
                "capture_id": cid,
                "flow_id": hs.flow.flow_id(),
                "client_addr": hs.flow.src_addr,
                "client_port": hs.flow.src_port,
                "server_addr": hs.flow.dst_addr,
                "server_port": hs.flow.dst_port,
                "hello_type": hs.hello_type,
                "record_version": hs.record_version.name,
                "effective_version": hs.effective_version.name,
                "server_name": hs.server_name,
                "ts": hs.ts,
                "incomplete": int(hs.incomplete),
                "suite_count": len(hs.cipher_suites),
                "suites": list(hs.cipher_suites),
            })
            n += 1

    hits, evidence = analyze_transactions(refs, config.detector, meta.device_name, cid)
    hit_rows = [{"txn_id": h.transaction_ref, "keyword": h.keyword, "location": h.location,
                 "capture_id": cid, "count": h.count, "raw_count": h.raw_count} for h in hits]
    ev_rows = [{"ev_id": f"{cid}/e{i:05d}", "capture_id": cid, "device_name": e.device_name,
                "kind": e.kind, "detail": e.detail, "transport_plaintext": int(e.transport_plaintext),
                "txn_id": e.transaction_ref} for i, e in enumerate(evidence)]
    return CaptureBundle(
        meta=meta,
        status="failed" if errors else "ok",
        error="; ".join(errors) or None,
        transactions=txn_rows,
        handshakes=hs_rows,
        hits=hit_rows,
        evidence=ev_rows,
    )


def _process_batch(batch: list[CaptureMeta], root: str, out_dir: str, config: Config) -> list[CaptureBundle]:
    out = []
    for meta in batch:
        try:
            out.append(process_capture(meta, root, out_dir, config))
        except Exception as exc:  # a bug on one capture must not sink the run
            log.exception("%s: extraction crashed", meta.capture_id)
            out.append(CaptureBundle(meta=meta, status="failed", error=f"{type(exc).__name__}: {exc}"))
    return out


def run_extract(root: str | os.PathLike, out_dir: str | os.PathLike, store_path: str | os.PathLike,
                config: Config, workers: int = 1, progress=None) -> ExtractResult:
    """Scan ``root``, extract every capture and commit the bundles to the store."""
    started = time.perf_counter()
    metas = scan_dataset(root, config.naming)
    batches = [b for b in partition_work(metas, workers) if b]
    catalog = load_catalog()
    result = ExtractResult(captures=len(metas))

    store = open_store(store_path, "write")
    try:
        store.set_info("config_hash", config.digest())
        store.set_info("keyword_corpus", ",".join(config.detector.keywords))
        store.set_info("catalog_snapshot", catalog.snapshot_date)
        store.set_info("tool_version", __version__)
        store.set_info("captures_discovered", str(len(metas)))
        store.register_captures(metas)

        def commit(bundle: CaptureBundle) -> None:
            try:
                store.commit_capture_results(bundle)
            except Exception as exc:
                log.error("%s: commit failed: %s", bundle.meta.capture_id, exc)
                store.mark_failed(bundle.meta.capture_id, f"commit failed: {exc}")
                bundle.status, bundle.error = "failed", f"commit failed: {exc}"
            if bundle.status == "failed":
                result.failed += 1
                result.errors[bundle.meta.capture_id] = bundle.error or "failed"
            else:
                result.processed += 1
            result.transactions += len(bundle.transactions)
            result.handshakes += len(bundle.handshakes)
            result.keyword_hits += sum(h["count"] for h in bundle.hits)
            result.evidence += len(bundle.evidence)
            result.packets += bundle.meta.packet_count
            if progress:
                progress(result.processed + result.failed, len(metas))

        root_s, out_s = str(root), str(out_dir)
        if workers == 1 or len(batches) <= 1:
            for batch in batches:
                for bundle in _process_batch(batch, root_s, out_s, config):
                    commit(bundle)
        else:
            # finer-grained chunks keep workers busy when capture sizes are skewed
            chunks = partition_work(metas, min(len(metas), workers * 8))
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_process_batch, chunk, root_s, out_s, config) for chunk in chunks if chunk]
                for fut in as_completed(futures):
                    for bundle in fut.result():
                        commit(bundle)
    finally:
        store.close()
    result.seconds = time.perf_counter() - started
    return result
