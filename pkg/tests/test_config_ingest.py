import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from iotupdate.config import ConfigError, NamingConfig, load_config, map_event_category, parse_config
from iotupdate.ingest import describe_capture, partition_work, scan_dataset


def test_defaults():
    cfg = load_config()
    assert cfg.detector.keywords == ("update", "upgrade", "firmware", "software", "download")
    assert cfg.naming.keyword_corpus == cfg.detector.keywords
    assert map_event_category("alexa_on", cfg.naming) == "AlexaInteraction"
    assert map_event_category("android_wan_off", cfg.naming) == "AndroidInteraction"
    assert map_event_category("power", cfg.naming) == "Power"
    assert map_event_category("something_else", cfg.naming) == "Other"


def test_user_file_layers_over_defaults(tmp_path):
    p = tmp_path / "my.ini"
    p.write_text("[events]\nvoice_* = AlexaInteraction\npower = Idle\n[detector]\nkeywords = patch, update\n")
    cfg = load_config(p)
    assert cfg.detector.keywords == ("patch", "update")
    assert map_event_category("voice_query", cfg.naming) == "AlexaInteraction"
    assert map_event_category("power", cfg.naming) == "Idle"
    assert map_event_category("idle", cfg.naming) == "Idle"
    assert cfg.digest() != load_config().digest()


def test_exact_event_keys_beat_globs():
    cfg = NamingConfig(event_mapping=(("alexa_*", "AlexaInteraction"), ("alexa_power", "Power")))
    assert map_event_category("alexa_power", cfg) == "Power"
    assert map_event_category("alexa_x", cfg) == "AlexaInteraction"


@pytest.mark.parametrize("text", [
    "[naming]\npath_pattern = {region}/{device}\n",
    "[naming]\npath_pattern = {device}/{experiment}/{colour}\n",
    "[events]\npower = Sleeping\n",
    "[detector]\nkeywords = Update\n",
    "[detector]\npayload_threshold = lots\n",
    "[detector]\nversion_regex = (\n",
    "not an ini file",
])
def test_invalid_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_describe_capture_binds_groups():
    cfg = load_config().naming
    m = describe_capture("uk/echo-dot/alexa_volume/2019-04-01/cap1.pcap", 10, cfg, "ds")
    assert (m.region, m.device_name, m.experiment_label, m.event_category, m.dataset_name) == \
        ("UK", "echo-dot", "alexa_volume", "AlexaInteraction", "ds")


def test_non_matching_path_warns(caplog):
    with caplog.at_level(logging.WARNING):
        m = describe_capture("loose.pcap", 1, load_config().naming, "ds")
    assert (m.device_name, m.event_category, m.region) == ("unknown", "Other", "Unknown")
    assert "does not match" in caplog.text


def test_scan_dataset_orders_and_filters(tmp_path):
    for rel in ("US/b/power/x.pcap", "US/a/idle/y.PCAPNG", "US/a/idle/notes.txt", "UK/c/power/z.cap"):
        p = tmp_path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(b"x" * 3)
    metas = scan_dataset(tmp_path, load_config().naming)
    assert [m.capture_id for m in metas] == ["UK/c/power/z.cap", "US/a/idle/y.PCAPNG", "US/b/power/x.pcap"]
    assert all(m.file_size == 3 for m in metas)


def test_scan_dataset_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_dataset(tmp_path / "nope", load_config().naming)


def test_partition_example():
    assert [len(b) for b in partition_work(list(range(10)), 3)] == [4, 3, 3]
    with pytest.raises(ValueError):
        partition_work([1], 0)


@given(items=st.lists(st.integers(), max_size=200), workers=st.integers(1, 40))
def test_partition_properties(items, workers):
    batches = partition_work(items, workers)
    assert len(batches) == workers
    assert [x for b in batches for x in b] == items
    sizes = [len(b) for b in batches]
    assert max(sizes) - min(sizes) <= 1
    assert sizes == sorted(sizes, reverse=True)
