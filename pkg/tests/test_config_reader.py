""" Basic functionality tests for config reader """

import pytest

from ctpretrain import ConfigReadError, ConfigValueError
from ctpretrain.config_reader import ConfigReader, apply_override


def test_config_folder():
    """Test a folder full of working config files"""
    config = ConfigReader("tests/config/working", raw=True)
    assert config.config_raw["seed"] == 3
    assert config.config_raw["pretrain"]["preset"] == "itd_mpd"


def test_config_file():
    """Test a single working config file"""
    config = ConfigReader("tests/config/working/0.yml", raw=True)
    assert config.config.model.arch == "vit"
    assert "pretrain" not in config.config_raw


def test_config_no_file():
    """No file gives an empty config"""
    config = ConfigReader(None)
    assert not config.config


def test_config_missing():
    """A missing path is reported, not exited on"""
    with pytest.raises(ConfigReadError) as excinfo:
        ConfigReader("tests/config/nothing_here.yml")
    assert excinfo.value.path == "tests/config/nothing_here.yml"


def test_config_broken():
    """Test a single broken config file"""
    with pytest.raises(ConfigReadError) as excinfo:
        ConfigReader("tests/config/broken.yml")
    assert excinfo.value.path == "tests/config/broken.yml"


def test_config_not_a_mapping():
    """A yaml list at the top level is rejected"""
    with pytest.raises(ConfigReadError) as excinfo:
        ConfigReader("tests/config/not_a_mapping.yml")
    assert "mapping" in excinfo.value.reason


def test_config_environment_variable(monkeypatch):
    """Test replacing an environment variable in a config file"""
    monkeypatch.setenv("CTP_RUNS_ROOT", "/tmp/ctp-runs")
    config = ConfigReader("tests/config/environment.yml")
    assert config.config.runs.root == "/tmp/ctp-runs"


def test_config_environment_variable_not_provided(monkeypatch):
    """Test replacing an nonexistant environment variable in a config file"""
    monkeypatch.delenv("CTP_RUNS_ROOT", raising=False)
    with pytest.raises(ConfigReadError) as excinfo:
        ConfigReader("tests/config/environment.yml")
    assert "CTP_RUNS_ROOT" in excinfo.value.reason


def test_config_raw_keeps_template(monkeypatch):
    """Raw mode leaves environment templates untouched"""
    monkeypatch.delenv("CTP_RUNS_ROOT", raising=False)
    config = ConfigReader("tests/config/environment.yml", raw=True)
    assert config.config.runs.root == "${CTP_RUNS_ROOT}"


def test_overrides():
    """Overrides are applied after reading and parsed as yaml scalars"""
    config = ConfigReader(
        "tests/config/working",
        overrides=["pretrain.epochs=7", "model.overrides.depth=3", "eval.overlap=iou"],
    )
    assert config.config.pretrain.epochs == 7
    assert config.config.pretrain.preset == "itd_mpd"
    assert config.config.model.overrides.depth == 3
    assert config.config["eval"].overlap == "iou"


@pytest.mark.parametrize(
    "override, expected",
    [
        ("a=1", {"a": 1}),
        ("a.b=true", {"a": {"b": True}}),
        ("a.b.c=[1, 2]", {"a": {"b": {"c": [1, 2]}}}),
        ("a=8.0e-4", {"a": 8.0e-4}),
        ("a=null", {"a": None}),
    ],
)
def test_apply_override(override, expected):
    """Dotted keys create nested mappings"""
    config = {}
    apply_override(config, override)
    assert config == expected


@pytest.mark.parametrize("override", ["no_equals_sign", "=3"])
def test_apply_override_malformed(override):
    """Overrides need a key and an equals sign"""
    with pytest.raises(ConfigValueError) as excinfo:
        apply_override({}, override)
    assert excinfo.value.field == "--set"
