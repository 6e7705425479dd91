import pytest
import yaml

from gepiii.config import PRESETS, ConfigError, load_config, parse_config


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load(name):
    cfg = load_config(name)
    assert cfg.name == name
    assert cfg.models
    assert cfg.recipe.name == cfg.features["recipe"]


def test_seed_propagates():
    cfg = load_config("winner5", seed=42)
    assert cfg.seed == 42
    assert all(m.gbt_params(cfg.seed).seed == 42 for m in cfg.models)
    assert cfg.section("train")["seed"] == 42 and cfg.section("blend")["seed"] == 42


def test_preset_overrides_merge(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"preset": "winner5", "blend": {"granularity": 0.1},
                                    "split": {"excluded_site_ids": [2]}}))
    cfg = load_config(str(path))
    assert cfg.blend["granularity"] == 0.1 and cfg.blend["optimize"] is True
    assert cfg.split.excluded_site_ids == frozenset({2})
    assert cfg.features["recipe"] == "winner5"


def _base():
    return {"schema_version": 1, "models": [{"name": "a"}]}


@pytest.mark.parametrize("patch, message", [
    ({"schema_version": 2}, "schema_version"),
    ({"colour": "blue"}, "unknown config keys"),
    ({"features": {"recipe": "winner9"}}, "winner9"),
    ({"models": [{"name": "a"}, {"name": "a"}]}, "unique"),
    ({"models": [{"name": "a", "learner": "svm"}]}, "svm"),
    ({"models": [{"name": "a", "params": {"n_bins": 1000}}]}, "n_bins"),
    ({"models": [{"name": "a", "subset": {"key": "floor"}}]}, "floor"),
    ({"cleaning": {"rules": [{"kind": "unit_rescale", "factor": -1}]}}, "factor"),
    ({"baselines": ["oracle"]}, "oracle"),
    ({"blend": {"weights": [1, 2]}}, "weight"),
    ({"preset": "winner7"}, "winner7"),
])
def test_invalid_configs(patch, message):
    with pytest.raises(ConfigError, match=message):
        parse_config({**_base(), **patch})


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")
