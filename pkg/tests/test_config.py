import json

import pytest

from phenocd.config import RunConfig, SceneConfig, build, load_config
from phenocd.errors import ConfigError


def test_defaults_validate_and_dump_round_trips(tmp_path):
    cfg = RunConfig()
    (tmp_path / "c.json").write_text(cfg.dump())
    assert load_config(tmp_path / "c.json") == cfg
    assert json.loads(cfg.dump())["schedule"]["val_period"] == 5


def test_dotted_overrides():
    cfg = load_config(None, {"schedule.lr": 0.05, "detector.fusion": "concat"})
    assert cfg.schedule.lr == 0.05 and cfg.detector.fusion == "concat"


@pytest.mark.parametrize("overrides, field", [
    ({"schedule.batch_size": 1}, "schedule.batch_size"),
    ({"schedule.epochs_stage1": 0}, "schedule.epochs_stage1"),
    ({"detector.fusion": "add"}, "detector.fusion"),
    ({"detector.height": 30}, "detector"),
    ({"loss.tau": 0}, "loss.tau"),
    ({"bogus": 1}, "bogus"),
    ({"scene.extra": 1}, "scene.extra"),
])
def test_errors_name_the_field(overrides, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(None, overrides)


def test_all_zero_weights_rejected():
    with pytest.raises(ConfigError):
        load_config(None, {"loss.w_cd": 0, "loss.w_sem": 0, "loss.w_clem": 0, "loss.w_plm": 0})


def test_class_count_must_agree():
    with pytest.raises(ConfigError):
        load_config(None, {"scene.num_classes": 3})


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_build_helper():
    assert build(SceneConfig, {"height": 32}, width=48).width == 48
    with pytest.raises(ConfigError, match="blob_count"):
        build(SceneConfig, blob_count=(5, 2))


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.json")):
        assert isinstance(load_config(path), RunConfig)
