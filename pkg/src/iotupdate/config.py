"""Pipeline configuration: naming conventions, event mapping, detector knobs.

The on-disk format is INI (see ``data/default.ini`` for the documented
defaults). A user file only needs the keys it overrides.
"""

from __future__ import annotations

import configparser
import fnmatch
import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

EVENT_CATEGORIES = ("Power", "Idle", "AlexaInteraction", "AndroidInteraction", "Other")
PATTERN_GROUPS = ("region", "device", "experiment", "dataset")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NamingConfig:
    path_pattern: str = "{region}/{device}/{experiment}/..."
    event_mapping: tuple[tuple[str, str], ...] = ()
    keyword_corpus: tuple[str, ...] = ("update", "upgrade", "firmware", "software", "download")

    def __post_init__(self):
        groups = set(re.findall(r"\{(\w+)\}", self.path_pattern))
        if not {"device", "experiment"} <= groups:
            raise ConfigError("path_pattern must bind {device} and {experiment}")
        unknown = groups - set(PATTERN_GROUPS)
        if unknown:
            raise ConfigError(f"unknown path_pattern groups: {sorted(unknown)}")
        for label, cat in self.event_mapping:
            if cat not in EVENT_CATEGORIES:
                raise ConfigError(f"event {label!r}: unknown category {cat!r}")
        validate_corpus(self.keyword_corpus)

    def compiled_pattern(self) -> re.Pattern:
        return compile_path_pattern(self.path_pattern)


def validate_corpus(corpus) -> None:
    for kw in corpus:
        if not kw or kw != kw.lower() or not kw.isascii():
            raise ConfigError(f"keyword {kw!r} must be nonempty lowercase ASCII")


def compile_path_pattern(pattern: str) -> re.Pattern:
    parts = []
    segments = pattern.strip("/").split("/")
    for i, seg in enumerate(segments):
        if seg == "...":
            if i != len(segments) - 1:
                raise ConfigError("'...' may only end a path_pattern")
            parts.append(r".+")
            continue
        pos = 0
        out = ""
        for m in re.finditer(r"\{(\w+)\}", seg):
            out += re.escape(seg[pos:m.start()]) + f"(?P<{m.group(1)}>[^/]+?)"
            pos = m.end()
        out += re.escape(seg[pos:])
        parts.append(out)
    return re.compile("/".join(parts) + r"\Z")


@dataclass(frozen=True)
class DetectorConfig:
    keywords: tuple[str, ...] = ("update", "upgrade", "firmware", "software", "download")
    firmware_extensions: tuple[str, ...] = (".bin", ".img", ".fw", ".swu", ".pkg", ".ipsw", ".trx")
    signature_tokens: tuple[str, ...] = ("signature", "certificate", "digest", "hash", "measurement")
    service_tokens: tuple[str, ...] = ("updatefirmware", "firmwareupdate", "update")
    version_key_tokens: tuple[str, ...] = ("firmware", "fw", "sw")
    version_regex: str = r"\d+(?:\.\d+){1,3}"
    payload_threshold: int = 1 << 20
    payload_content_types: tuple[str, ...] = (
        "application/octet-stream", "application/zip", "application/x-zip-compressed",
        "application/x-gzip", "application/gzip",
    )
    payload_denied_types: tuple[str, ...] = ("video/*", "audio/*", "image/*")

    def __post_init__(self):
        validate_corpus(self.keywords)
        try:
            re.compile(self.version_regex)
        except re.error as exc:
            raise ConfigError(f"bad version_regex: {exc}") from None


@dataclass(frozen=True)
class Config:
    naming: NamingConfig = field(default_factory=NamingConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    source_text: str = ""

    def digest(self) -> str:
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()[:16]


def map_event_category(label: str, cfg: NamingConfig) -> str:
    """Event category for an experiment label; unmapped labels give "Other"."""
    for key, cat in cfg.event_mapping:
        if key == label:
            return cat
    for key, cat in cfg.event_mapping:
        if any(c in key for c in "*?[") and fnmatch.fnmatchcase(label, key):
            return cat
    return "Other"


def _list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def default_config_text() -> str:
    return resources.files("iotupdate.data").joinpath("default.ini").read_text("utf-8")


def parse_config(text: str, base: str | None = None) -> Config:
    """Build a Config from INI text layered over ``base`` (the defaults when None)."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    layers = [default_config_text() if base is None else base]
    if text:
        layers.append(text)
    try:
        for layer in layers:
            parser.read_string(layer)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None

    naming = parser["naming"] if parser.has_section("naming") else {}
    events = parser["events"] if parser.has_section("events") else {}
    det = parser["detector"] if parser.has_section("detector") else {}
    keywords = _list(det.get("keywords", "update, upgrade, firmware, software, download"))
    naming_cfg = NamingConfig(
        path_pattern=naming.get("path_pattern", NamingConfig.path_pattern),
        event_mapping=tuple((k, v.strip()) for k, v in events.items()),
        keyword_corpus=keywords,
    )
    defaults = DetectorConfig()
    try:
        threshold = int(det.get("payload_threshold", defaults.payload_threshold))
    except ValueError:
        raise ConfigError("payload_threshold must be an integer") from None
    det_cfg = DetectorConfig(
        keywords=keywords,
        firmware_extensions=tuple(e.lower() for e in _list(det.get("firmware_extensions", ",".join(defaults.firmware_extensions)))),
        signature_tokens=_list(det.get("signature_tokens", ",".join(defaults.signature_tokens))),
        service_tokens=_list(det.get("service_tokens", ",".join(defaults.service_tokens))),
        version_key_tokens=_list(det.get("version_key_tokens", ",".join(defaults.version_key_tokens))),
        version_regex=det.get("version_regex", defaults.version_regex),
        payload_threshold=threshold,
        payload_content_types=_list(det.get("payload_content_types", ",".join(defaults.payload_content_types))),
        payload_denied_types=_list(det.get("payload_denied_types", ",".join(defaults.payload_denied_types))),
    )
    return Config(naming_cfg, det_cfg, "\n".join(layers))


def load_config(path: str | Path | None = None) -> Config:
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
