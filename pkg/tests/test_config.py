import json

import pytest

from admmq.config import RunConfig, from_dict, load_config, reference_config
from admmq.errors import ConfigError


def test_reference_config_round_trips():
    ref = reference_config()
    assert from_dict(ref) == RunConfig()
    assert ref["admm"]["rho"] == {"rho_initial": 1e-3, "growth_factor": 10.0, "period": 3, "rho_max": 0.1}
    assert ref["admm"]["epochs_per_w_update"] == 3 and ref["admm"]["max_admm_iterations"] == 30
    assert ref["admm"]["tol"] == 1e-3


@pytest.mark.parametrize(
    "bad",
    [
        {"sed": 1},
        {"admm": {"rho": {"rho_intial": 1.0}}},
        {"model": {"arch": "resnet"}},
        {"admm": {"tol": "small"}},
        {"seed": 1.5},
        {"seed": True},
        {"progressive": {"num_steps": 2, "stages": ["binary"]}},
        {"pretrain": {"lr": -1}},
        {"admm": []},
    ],
)
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_partial_config_keeps_defaults():
    cfg = from_dict({"admm": {"rho": {"growth_factor": 1.0}}, "progressive": {"num_steps": 1}})
    assert cfg.admm.rho.growth_factor == 1.0 and cfg.admm.rho.rho_initial == 1e-3
    assert cfg.progressive_config().stages == ["binary"]


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"seed": 4}))
    assert load_config(tmp_path / "ok.json").seed == 4
