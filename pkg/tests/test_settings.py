import json
import logging

import pytest
from pydantic import ValidationError

from mint_audit.config.settings import RegimePresets, ScalePresets, Settings


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("MINT_LOG_LEVEL", "debug")
    monkeypatch.setenv("MINT_DATA_ROOT", str(tmp_path / "datasets"))
    monkeypatch.setenv("MINT_ALLOW_DOWNLOAD", "true")

    settings = Settings()

    assert settings.log_level == "DEBUG"
    assert settings.data_root == tmp_path / "datasets"
    assert settings.allow_download is True


def test_rejects_unknown_environment():
    with pytest.raises(ValidationError):
        Settings(environment="staging")


def test_rejects_unknown_log_level():
    with pytest.raises(ValidationError):
        Settings(log_level="chatty")


def test_json_logging(capsys, restore_root_logger):
    Settings(log_json=True, log_format="%(levelname)s %(name)s %(message)s").setup_logging("INFO")

    logging.getLogger("mint_audit.test").info("hello")

    line = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(line)
    assert payload["message"] == "hello"
    assert payload["levelname"] == "INFO"


def test_regime_presets():
    e1 = RegimePresets.get("E1")
    e2 = RegimePresets.get("e2")

    assert e1["weights"]["lambda2"] / e1["weights"]["lambda1"] == 10
    assert e2["weights"]["lambda2"] / e2["weights"]["lambda1"] == 10000
    assert e2["mint_head"]["per_path_conv_channels"] == [1024, 2048]
    with pytest.raises(ValueError):
        RegimePresets.get("e3")


def test_scale_presets():
    assert ScalePresets.get("smoke")["members"] == 1000
    assert ScalePresets.get("DESK")["externals"] == 10000
    assert ScalePresets.get("desk")["batch_size"] % 2 == 0
    assert ScalePresets.SEEDS_PER_CELL == 3
