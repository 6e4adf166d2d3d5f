import pytest
import yaml

from regime_risk import config
from regime_risk.errors import ConfigError
from regime_risk.stress_engine import QuantileGrid, StressCategorySpec


def load(tmp_path, data, **over):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(data))
    return config.load_config(p, over)


def test_defaults():
    cfg = config.load_config()
    vc, sc = config.var_config(cfg), config.stress_config(cfg)
    assert (vc.D, vc.T, vc.vi.K, vc.categories.J) == (1, 250, 3, 3)
    assert (sc.L, sc.H, sc.window, sc.vi.K, sc.categories.J) == (15, 45, 1000, 4, 8)
    assert isinstance(sc.categories, QuantileGrid)


def test_precedence(tmp_path):
    cfg = load(tmp_path, {"seed": 4, "output": {"dir": "x"}}, seed=9)
    assert cfg["seed"] == 9 and cfg["output"]["dir"] == "x" and cfg["jobs"] == 1


def test_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="var.Tee"):
        load(tmp_path, {"var": {"Tee": 3}})


def test_string_numbers(tmp_path):
    assert load(tmp_path, {"vi": {"rel_tol": "1e-8"}})["vi"]["rel_tol"] == 1e-8


@pytest.mark.parametrize("data", [
    {"vi": {"K": 0}},
    {"var": {"confidences": [1.5]}},
    {"var": {"thresholds": []}},
    {"stress": {"p_stars": [0.0]}},
    {"stress": {"risk_factors": {"SPX": "log"}}},
    {"stress": {"key_factor": "EURUSD"}},
    {"var": {"features": [{"name": "a", "series": "SPX", "transform": "wobble"}]}},
    {"portfolio": {"SPX": {"weight": 1.0, "rule": "exotic"}}},
    {"seed": -1},
])
def test_rejects(tmp_path, data):
    with pytest.raises(ConfigError):
        load(tmp_path, data)


def test_explicit_grid(tmp_path):
    cfg = load(tmp_path, {"stress": {"loss_thresholds": [[-0.08, -0.03], [-0.08, -0.03]]}})
    spec = config.stress_config(cfg).categories
    assert isinstance(spec, StressCategorySpec) and spec.J == 6


def test_missing_file():
    with pytest.raises(ConfigError):
        config.load_config("/nonexistent/c.yaml")
