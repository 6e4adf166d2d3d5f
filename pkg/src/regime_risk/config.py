"""Run configuration: YAML file -> validated settings for each command.

Precedence is command-line flag > config file > built-in default. Unknown
keys are rejected so that typos do not silently fall back to defaults.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .market_data import FeatureSpec, Portfolio, TimeSeriesPanel
from .stress_engine import QuantileGrid, ShiftConstraint, StressCategorySpec, StressConfig
from .var_engine import PnlCategorySpec, VarConfig
from .vi_core import VIConfig

PORTFOLIO_SERIES = "PORTFOLIO"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "data": {"path": None, "date_column": "date", "columns": None},
    "output": {"dir": "out"},
    "portfolio": {
        "SPX": {"weight": 0.5, "rule": "relative"},
        "UST10Y": {"weight": 0.5, "rule": "bond", "duration": 8.5, "yield_scale": 0.01},
    },
    "vi": {"K": 3, "restarts": 2, "max_sweeps": 500, "rel_tol": 1e-8,
           "alpha0": 1.0, "r0_scale": 4.0, "m_scale": 1.0},
    "var": {
        "D": 1, "T": 250, "confidences": [0.95, 0.975],
        "thresholds": [-0.8, 0.8], "normalization": "zscore",
        "gaussian_zero_mean": False, "stride": 1, "start": None, "end": None,
        "features": [
            {"name": "ust10y_chg1_z", "series": "UST10Y", "transform": "change", "lag": 1,
             "zscore_window": 250},
            {"name": "vix_chg5_z", "series": "VIX", "transform": "change", "lag": 5,
             "zscore_window": 250},
            {"name": "usdjpy_std5_minus_std250", "series": "USDJPY", "transform": "std_diff",
             "short": 5, "long": 250, "mode": "relative"},
        ],
    },
    "fit": {"asof": None},
    "stress": {
        "K": 4, "L": 15, "H": 45, "window": 1000, "p_stars": [0.75, 0.95],
        "risk_factors": {"SPX": "relative", "UST10Y": "difference"},
        "key_factor": "UST10Y", "key_thresholds": [0.0],
        "quantiles": [[0.2, 0.4, 0.6, 0.8], [1 / 3, 2 / 3]],
        "loss_thresholds": None,
        "constraint": None,
        "record_stride": 1,
        "asof": None,
        "rolling": None,          # {start, end, stride} for a daily track
        "features": [
            {"name": "dxy_gap_z", "series": "DXY", "transform": "mean_gap", "short": 5,
             "long": 250, "zscore_window": 250},
            {"name": "vix_gap_z", "series": "VIX", "transform": "mean_gap", "short": 5,
             "long": 250, "zscore_window": 250},
            {"name": "portfolio_gap_z", "series": PORTFOLIO_SERIES, "transform": "mean_gap",
             "short": 10, "long": 250, "zscore_window": 250},
        ],
    },
    "synth": {
        "kind": "market", "n_days": 1300, "switch_day": 1000,
        # kind=var / kind=stress
        "T": 400, "pi": [0.5, 0.5], "mu": [[-5.0], [5.0]], "M": [[1.0]],
        "theta": [[0.8, 0.15, 0.05], [0.05, 0.15, 0.8]],
        "bivariate": None,
    },
}

_FREE_FORM = {"portfolio", "risk_factors"}


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k not in _FREE_FORM:
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: Mapping | None = None) -> dict:
    raw: Mapping = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from None
        if not isinstance(raw, Mapping):
            raise ConfigError("config file must hold a mapping")
    cfg = _merge(DEFAULTS, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    validate(cfg)
    return cfg


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _int(cfg, key, lo=1):
    v = cfg[key]
    _check(isinstance(v, int) and not isinstance(v, bool) and v >= lo, f"{key} must be an integer >= {lo}")
    return v


def _num(node, key):
    # YAML 1.1 reads "1e-8" as a string
    try:
        node[key] = float(node[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a number, got {node[key]!r}") from None
    return node[key]


def _prob(v, what):
    try:
        v = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a number, got {v!r}") from None
    _check(0.0 < v < 1.0, f"{what} must lie strictly between 0 and 1, got {v!r}")


def validate(cfg: dict) -> None:
    _int(cfg, "seed", 0)
    _int(cfg, "jobs", 1)
    for k in ("K", "restarts", "max_sweeps"):
        _int(cfg["vi"], k, 0 if k == "restarts" else 1)
    for k in ("rel_tol", "alpha0", "r0_scale", "m_scale"):
        _check(_num(cfg["vi"], k) > 0, f"vi.{k} must be positive")
    v = cfg["var"]
    _int(v, "D"), _int(v, "T", 2), _int(v, "stride")
    _check(len(v["confidences"]) > 0, "var.confidences is empty")
    for c in v["confidences"]:
        _prob(c, "confidence")
    _check(len(v["thresholds"]) >= 1, "var needs J >= 2 categories (at least one threshold)")
    s = cfg["stress"]
    for k in ("K", "L", "H", "window", "record_stride"):
        _int(s, k)
    _check(len(s["p_stars"]) > 0, "stress.p_stars is empty")
    for p in s["p_stars"]:
        _prob(p, "p_star")
    _check(isinstance(s["risk_factors"], Mapping) and s["risk_factors"], "stress.risk_factors is empty")
    for name, mode in s["risk_factors"].items():
        _check(mode in ("difference", "relative"), f"risk factor {name!r}: unknown shift mode {mode!r}")
    if s["key_factor"] is not None:
        _check(s["key_factor"] in s["risk_factors"], f"key risk factor {s['key_factor']!r} is not a risk factor")
    _check(cfg["synth"]["kind"] in ("market", "var", "stress"), "synth.kind must be market, var or stress")
    # builders raise ValueError on malformed pieces; surface them as config errors
    try:
        portfolio(cfg), var_config(cfg), stress_config(cfg)
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from None


def portfolio(cfg: dict) -> Portfolio:
    return Portfolio.from_dict(cfg["portfolio"])


def vi_config(cfg: dict, K: int | None = None) -> VIConfig:
    v = cfg["vi"]
    return VIConfig(K=K or v["K"], restarts=v["restarts"], max_sweeps=v["max_sweeps"],
                    rel_tol=float(v["rel_tol"]), alpha0=float(v["alpha0"]),
                    r0_scale=float(v["r0_scale"]), m_scale=float(v["m_scale"]))


def features(specs) -> tuple[FeatureSpec, ...]:
    if not specs:
        raise ConfigError("feature list is empty")
    return tuple(FeatureSpec.from_dict(f) for f in specs)


def var_config(cfg: dict) -> VarConfig:
    v = cfg["var"]
    return VarConfig(
        portfolio=portfolio(cfg), features=features(v["features"]), D=v["D"], T=v["T"],
        confidences=tuple(float(c) for c in v["confidences"]),
        categories=PnlCategorySpec(tuple(v["thresholds"]), v["normalization"]),
        vi=vi_config(cfg), gaussian_zero_mean=bool(v["gaussian_zero_mean"]), stride=v["stride"],
        start=v["start"], end=v["end"], seed=cfg["seed"], jobs=cfg["jobs"])


def stress_config(cfg: dict) -> StressConfig:
    s = cfg["stress"]
    key = s["key_factor"]
    if s["loss_thresholds"] is not None:
        cats = StressCategorySpec(tuple(tuple(b) for b in s["loss_thresholds"]),
                                  tuple(s["key_thresholds"]) if key else (), key)
    else:
        cats = QuantileGrid(tuple(tuple(b) for b in s["quantiles"]),
                            tuple(s["key_thresholds"]) if key else (), key)
    c = s["constraint"]
    constraint = None
    if c is not None:
        constraint = ShiftConstraint(c["risk_factor"], c.get("direction", "ge"),
                                     float(c.get("threshold", 0.0)), c.get("mode", "difference"))
    return StressConfig(
        portfolio=portfolio(cfg), features=features(s["features"]),
        risk_factors=dict(s["risk_factors"]), categories=cats, L=s["L"], H=s["H"],
        window=s["window"], p_stars=tuple(float(p) for p in s["p_stars"]),
        vi=vi_config(cfg, s["K"]), constraint=constraint, record_stride=s["record_stride"],
        seed=cfg["seed"])


def check_panel(cfg: dict, panel: TimeSeriesPanel, command: str) -> TimeSeriesPanel:
    """Resolve cross-references against the loaded data.

    Adds the portfolio index as series ``PORTFOLIO`` when features use it.
    """
    specs = cfg["stress"]["features"] if command == "stress-design" else cfg["var"]["features"]
    port = portfolio(cfg)
    missing = [s for s in port.series if s not in panel.series]
    _check(not missing, f"portfolio references series missing from the data: {missing}")
    if any(f["series"] == PORTFOLIO_SERIES for f in specs) and PORTFOLIO_SERIES not in panel.series:
        panel = panel.with_series(PORTFOLIO_SERIES, port.index_path(panel))
    missing = [f["series"] for f in specs if f["series"] not in panel.series]
    _check(not missing, f"features reference series missing from the data: {missing}")
    if command == "stress-design":
        s = cfg["stress"]
        names = list(s["risk_factors"]) + ([s["constraint"]["risk_factor"]] if s["constraint"] else [])
        missing = [n for n in names if n not in panel.series]
        _check(not missing, f"risk factors missing from the data: {missing}")
    return panel


def plain(obj):
    """Config echo with floats/tuples made JSON-friendly."""
    if isinstance(obj, Mapping):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj
