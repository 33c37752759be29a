import json

import pytest

from tclnet.config import RunConfig, parse_config, parse_config_text, write_resolved
from tclnet.errors import InvalidParameterError


def test_minimal_config_gets_documented_defaults():
    cfg = parse_config_text("{}")
    doc = json.loads(cfg.resolved_json())
    assert doc["data"] == {
        "n_a": 16,
        "n_t": 16,
        "n_c": 32,
        "num_paths": 3,
        "max_delay_taps": 8,
        "samples": 200,
        "seed": 0,
        "snr_db": None,
    }
    assert doc["lossy"]["cr_num"] == 1 and doc["lossy"]["cr_den"] == 4
    assert doc["lossy"]["window"] == 4 and doc["lossy"]["heads"] == 2 and doc["lossy"]["r"] == 8
    assert (doc["lm"]["embed"], doc["lm"]["blocks"], doc["lm"]["heads"], doc["lm"]["ffn"]) == (64, 2, 4, 256)
    assert doc["codec"]["n_bits"] == 7 and doc["codec"]["c"] == 0.5
    assert set(doc["paths"]) == {"dataset", "checkpoints", "out"}


def test_partial_sections_merge_with_defaults():
    cfg = parse_config_text('{"lossy": {"epochs": 3}, "codec": {"c": 0.25}}')
    assert cfg.lossy.epochs == 3 and cfg.lossy.window == 4
    assert cfg.codec.c == 0.25


def test_unknown_key_is_named():
    with pytest.raises(InvalidParameterError, match="windw"):
        parse_config_text('{"lossy": {"windw": 2}}')
    with pytest.raises(InvalidParameterError, match="extra_section"):
        parse_config_text('{"extra_section": {}}')


def test_wrong_type_is_named():
    with pytest.raises(InvalidParameterError, match="samples"):
        parse_config_text('{"data": {"samples": "many"}}')


@pytest.mark.parametrize(
    "text,key",
    [
        ('{"lossy": {"cr_den": 0}}', "cr_den"),
        ('{"lossy": {"cr_num": 5, "cr_den": 4}}', "cr_num"),
        ('{"codec": {"c": 1.5}}', "c"),
        ('{"codec": {"n_bits": 9}}', "n_bits"),
        ('{"codec": {"provider": "gpt"}}', "provider"),
        ('{"lm": {"embed": 10, "heads": 4}}', "embed"),
        ('{"data": {"n_a": 64, "n_c": 32}}', "n_a"),
    ],
)
def test_invalid_values(text, key):
    with pytest.raises(InvalidParameterError, match=key):
        parse_config_text(text)


def test_not_json():
    with pytest.raises(InvalidParameterError):
        parse_config_text("{data: 1}")


def test_missing_file(tmp_path):
    with pytest.raises(InvalidParameterError):
        parse_config(tmp_path / "nope.json")


def test_resolved_echo_round_trips(tmp_path):
    cfg = parse_config_text('{"data": {"seed": 7}}')
    path = write_resolved(cfg, tmp_path / "run")
    again = RunConfig.model_validate_json(path.read_text())
    assert again == cfg
    assert path.read_text() == cfg.resolved_json()
