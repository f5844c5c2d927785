import json

import pytest

from harness.experiment_config import ConfigError, ExperimentConfig, from_dict, load_config, save_config, to_dict
from utils.parsing import apply_overrides, parse_override


@pytest.mark.parametrize("text,expected", [
    ("data.max_disp=2", (["data", "max_disp"], 2)),
    ("gradient.damping=gate", (["gradient", "damping"], "gate")),
    ("correction.gammas=[0.5, 1.0]", (["correction", "gammas"], [0.5, 1.0])),
    ("adjoint_solver=null", (["adjoint_solver"], None)),
])
def test_parse_override(text, expected):
    assert parse_override(text) == expected


@pytest.mark.parametrize("text", ["no_equals", "=3", "data..seed=1", "1data=2"])
def test_parse_override_rejects_malformed_text(text):
    with pytest.raises(ValueError):
        parse_override(text)


def test_apply_overrides_creates_sections():
    raw = {"data": {"seed": 1}}
    apply_overrides(raw, ["data.seed=5", "run.steps=3"])
    assert raw == {"data": {"seed": 5}, "run": {"steps": 3}}
    with pytest.raises(ValueError):
        apply_overrides({"run": 3}, ["run.steps=1"])


def test_defaults_validate():
    cfg = load_config(None)
    assert cfg.forward_config().max_iters == 40
    assert cfg.adjoint_config() == cfg.forward_config()
    assert cfg.schedule().freq == 0


def test_overrides_and_seed_reach_the_config():
    cfg = load_config(None, ["correction.freq=2", "gradient.mode=ift", "adjoint_solver.max_iters=7"], seed=11)
    assert cfg.data.seed == 11
    assert cfg.schedule().gammas == pytest.approx((0.8, 1.0))
    assert cfg.gradient_mode().tag == "ift"
    assert cfg.gradient_mode().backward.max_iters == 7


@pytest.mark.parametrize("raw", [
    {"data": {"sead": 1}},
    {"optimiser": {}},
    {"run": {"loss_kind": "huber"}},
    {"data": {"max_disp": 16.0}},
    {"forward_solver": {"method": "newton"}},
    {"correction": {"freq": 2, "gammas": [0.5]}},
    {"gradient": {"damping": 2.0}},
    {"model": {"variant": "pwc"}},
    {"ablation": {"freq_list": [4]}},
    {"bench": {"spectral_radii": [1.0]}},
    {"data": "not-an-object"},
])
def test_invalid_configs_raise_config_error(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_unreadable_files_raise_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_echoed_config_reproduces_the_run(tmp_path):
    cfg = load_config(None, ["correction.freq=1", "model.variant=gma", "run.steps=3"], seed=4)
    path = tmp_path / "config.json"
    save_config(str(path), cfg)
    reloaded = from_dict(json.loads(path.read_text()))
    assert to_dict(reloaded) == to_dict(cfg)
    assert isinstance(reloaded, ExperimentConfig)
