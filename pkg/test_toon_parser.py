"""
Tests for the TOON config reader/writer and the config layer in constants.py
"""

import pytest

import constants
from toon_parser import ToonParseError, ToonParser, dump_toon, load_toon_file, save_toon_file


SAMPLE = """
# comment line
boost:
  nu: 0.1
  m_stop: 1000
  stopping: cv
  slope_interactions: false
grid:
  tau[3]: 0.4,0.8,1.6
  p[2]: 10,25
  variants[2]:
    - cv
    - aic
label: "a: quoted, string"
missing: null
"""


def test_parse_nested_objects_and_primitives():
    data = ToonParser().parse(SAMPLE)
    assert data["boost"] == {"nu": 0.1, "m_stop": 1000, "stopping": "cv", "slope_interactions": False}
    assert data["label"] == "a: quoted, string"
    assert data["missing"] is None


def test_parse_inline_and_list_arrays():
    grid = ToonParser().parse(SAMPLE)["grid"]
    assert grid["tau"] == [0.4, 0.8, 1.6]
    assert grid["p"] == [10, 25]
    assert grid["variants"] == ["cv", "aic"]


def test_scientific_notation_is_float():
    data = ToonParser().parse("x: 1e-10\ny: -2.5E3\nz: 7\n")
    assert data == {"x": 1e-10, "y": -2500.0, "z": 7}
    assert isinstance(data["z"], int)


def test_strict_length_mismatch():
    with pytest.raises(ToonParseError, match="length mismatch"):
        ToonParser(strict=True).parse("tau[3]: 0.4,0.8\n")
    assert ToonParser(strict=False).parse("tau[3]: 0.4,0.8\n") == {"tau": [0.4, 0.8]}


def test_duplicate_key_rejected_in_strict_mode():
    with pytest.raises(ToonParseError, match="duplicate"):
        ToonParser().parse("a: 1\na: 2\n")


def test_tab_indentation_rejected():
    with pytest.raises(ToonParseError, match="tabs"):
        ToonParser().parse("boost:\n\tnu: 0.1\n")


def test_malformed_line():
    with pytest.raises(ToonParseError, match="expected 'key: value'"):
        ToonParser().parse("just some words\n")


def test_dump_and_reload(tmp_path):
    data = {
        "boost": {"nu": 0.1, "stopping": "aic", "flag": True},
        "grid": {"tau": [0.4, 1.6], "design": "random_slopes"},
        "note": "needs: quoting",
    }
    path = tmp_path / "out.toon"
    save_toon_file(data, str(path))
    assert load_toon_file(str(path)) == data


def test_dump_keeps_float_precision():
    text = dump_toon({"x": 0.1 + 0.2})
    assert ToonParser().parse(text)["x"] == 0.1 + 0.2


def test_missing_file():
    with pytest.raises(ToonParseError, match="File not found"):
        load_toon_file("/nonexistent/grblmm.toon")


def test_shipped_config_matches_defaults():
    assert constants.load_config(constants.DEFAULT_CONFIG_FILE) == constants.DEFAULTS


def test_config_overlay(tmp_path):
    path = tmp_path / "custom.toon"
    path.write_text("boost:\n  nu: 0.25\n  stopping: aic\n", encoding="utf-8")
    config = constants.load_config(str(path))
    assert config["boost"]["nu"] == 0.25
    assert config["boost"]["stopping"] == "aic"
    assert config["boost"]["m_stop"] == constants.DEFAULTS["boost"]["m_stop"]
    assert config["numerics"] == constants.DEFAULTS["numerics"]


def test_shipped_grids_parse():
    for name in ("table1_grid.toon", "table3_grid.toon"):
        grid = load_toon_file(f"{constants.CONFIG_DIR}/{name}")["grid"]
        assert grid["tau"] == [0.4, 0.8, 1.6]
        assert grid["p"] == [10, 25, 50, 100, 500]
        assert grid["variants"] == ["cv", "aic"]
