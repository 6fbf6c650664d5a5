"""Dataset discovery: per-capture metadata from path conventions, work batching."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .config import NamingConfig, map_event_category

log = logging.getLogger(__name__)

CAPTURE_EXTENSIONS = (".pcap", ".pcapng", ".cap")
REGIONS = ("US", "UK")


@dataclass(frozen=True)
class CaptureMeta:
    capture_id: str
    dataset_name: str
    region: str
    device_name: str
    experiment_label: str
    event_category: str
    file_size: int
    packet_count: int = 0

    def with_packet_count(self, n: int) -> "CaptureMeta":
        return replace(self, packet_count=n)


def _normalise_region(value: str | None) -> str:
    if not value:
        return "Unknown"
    value = value.upper()
    return value if value in REGIONS else "Unknown"


def describe_capture(rel_path: str, size: int, cfg: NamingConfig, dataset_name: str) -> CaptureMeta:
    m = cfg.compiled_pattern().match(rel_path)
    if m is None:
        log.warning("%s: path does not match pattern %r", rel_path, cfg.path_pattern)
        return CaptureMeta(rel_path, dataset_name, "Unknown", "unknown", "", "Other", size)
    groups = m.groupdict()
    label = groups["experiment"]
    return CaptureMeta(
        capture_id=rel_path,
        dataset_name=groups.get("dataset") or dataset_name,
        region=_normalise_region(groups.get("region")),
        device_name=groups["device"],
        experiment_label=label,
        event_category=map_event_category(label, cfg),
        file_size=size,
    )


def scan_dataset(root: str | os.PathLike, cfg: NamingConfig) -> list[CaptureMeta]:
    """One CaptureMeta per capture file under ``root``, in lexicographic path order.

    capture_id is the POSIX-style path relative to ``root``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a readable directory")
    try:
        os.listdir(root)
    except OSError as exc:
        raise FileNotFoundError(f"dataset root {root} is not readable: {exc}") from None

    def onerror(exc: OSError) -> None:
        log.warning("skipping unreadable directory %s: %s", exc.filename, exc.strerror)

    found = []
    for dirpath, dirnames, filenames in os.walk(root, onerror=onerror):
        dirnames.sort()
        for name in filenames:
            if not name.lower().endswith(CAPTURE_EXTENSIONS):
                continue
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            try:
                size = full.stat().st_size
                with open(full, "rb"):
                    pass
            except OSError as exc:
                log.warning("skipping unreadable capture %s: %s", rel, exc)
                continue
            found.append((rel, size))
    found.sort()
    return [describe_capture(rel, size, cfg, root.name) for rel, size in found]


def partition_work(metas: list, workers: int) -> list[list]:
    """Split into exactly ``workers`` contiguous batches whose sizes differ by at most one.

    Earlier batches take the remainder, so 10 items over 3 workers gives 4, 3, 3.
    With fewer items than workers the tail batches are empty.
    """
    if not isinstance(workers, int) or workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers!r}")
    base, extra = divmod(len(metas), workers)
    batches = []
    pos = 0
    for i in range(workers):
        n = base + (1 if i < extra else 0)
        batches.append(list(metas[pos:pos + n]))
        pos += n
    return batches
