"""Command-line entry point: ``regime-risk <command> [--config PATH] ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
Every command computes all of its outputs before touching the output
directory, so a failing run leaves no partial files behind.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, oracle_lab, vi_core
from .errors import ConfigError, DataError, NumericalError, RegimeRiskError
from .market_data import build_features, iter_dates, load_panel, simulate_hist_returns
from .stress_engine import design_rolling, design_scenario
from .var_engine import bucket_returns, var_backtest

log = logging.getLogger("regime_risk")


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _json(payload: dict) -> str:
    # strict JSON: NaN -> null, +-inf -> "inf"/"-inf"
    return json.dumps(_finite(payload), indent=2, allow_nan=False) + "\n"


def _document(command: str, cfg: dict, body: dict) -> str:
    return _json({
        "metadata": {"command": command, "version": __version__,
                     "created_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")},
        "config": cfgmod.plain(cfg),
        **body,
    })


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_outputs(out_dir, files: dict[str, str]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = []
    try:
        for name, text in files.items():
            p = out / (name + ".tmp")
            p.write_text(text)
            tmp.append((p, out / name))
    except OSError:
        for p, _ in tmp:
            p.unlink(missing_ok=True)
        raise
    for p, final in tmp:
        os.replace(p, final)
    return [final for _, final in tmp]


def _panel(cfg: dict, command: str):
    path = cfg["data"]["path"]
    if not path:
        raise ConfigError("no input data: set data.path or pass --data")
    panel = load_panel(path, {"date_column": cfg["data"]["date_column"], "columns": cfg["data"]["columns"]})
    return cfgmod.check_panel(cfg, panel, command)


def _asof_index(panel, asof) -> int:
    return len(panel) - 1 if asof is None else panel.index_of(str(asof))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_fit(cfg: dict) -> dict[str, str]:
    """Fit the regime model on the VaR calibration set at one date."""
    panel = _panel(cfg, "fit")
    vc = cfgmod.var_config(cfg)
    feats = build_features(panel, vc.features)
    pos = np.full(len(panel), -1)
    pos[np.searchsorted(panel.dates, feats.dates)] = np.arange(len(feats))
    t = _asof_index(panel, cfg["fit"]["asof"])
    hist = simulate_hist_returns(panel, vc.portfolio, vc.D, vc.T, t)
    rows = pos[t - vc.D - np.arange(1, vc.T + 1)]
    if np.any(rows < 0):
        raise DataError(f"features unavailable inside the calibration window ending {panel.dates[t]}")
    x = feats.x[rows]
    dist = bucket_returns(hist, vc.categories)
    seed = cfg["seed"]
    hyper = vc.vi.hyperparams(x, vc.categories.J, seed)
    state = vi_core.cavi_fit(vi_core.ObservationSet(x, dist.labels), hyper, vc.vi.options(seed))
    probs = [vi_core.predictive_cluster_probs(r, hyper, state) for r in feats.x]
    trace = state.elbo_trace
    body = {
        "asof": str(panel.dates[t]),
        "feature_names": list(feats.feature_names),
        "category_counts": dist.counts.tolist(),
        "hyperparams": {"pi": hyper.pi.tolist(), "mu0": hyper.mu0.tolist(), "R0": hyper.R0.tolist(),
                        "M": hyper.M.tolist(), "alpha0": hyper.alpha0.tolist()},
        "elbo_monotone": bool(all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))),
        "state": vi_core.state_to_dict(state),
    }
    return {
        "state.json": _document("fit", cfg, body),
        "elbo_trace.csv": _csv(["sweep", "elbo"], [[i, repr(v)] for i, v in enumerate(trace)]),
        "cluster_probs.csv": _csv(["date", *(f"cluster_{k}" for k in range(hyper.K))],
                                  [[d, *(repr(float(v)) for v in p)]
                                   for d, p in zip(iter_dates(feats.dates), probs)]),
    }


def cmd_var_backtest(cfg: dict) -> dict[str, str]:
    panel = _panel(cfg, "var-backtest")
    report = var_backtest(panel, cfgmod.var_config(cfg))
    if not report.rows:
        raise NumericalError(f"every backtest date failed; first: {report.failures[0]['error']}")
    for f in report.failures:
        log.warning("%s: %s", f["date"], f["error"])
    return {
        "backtest.csv": report.to_csv(),
        "backtest.json": _document("var-backtest", cfg, {"report": report.to_dict()}),
        "var_plot_data.csv": report.plot_csv(),
    }


def cmd_stress_design(cfg: dict) -> dict[str, str]:
    panel = _panel(cfg, "stress-design")
    sc = cfgmod.stress_config(cfg)
    rolling = cfg["stress"]["rolling"]
    if not rolling:
        design = design_scenario(panel, sc, cfg["stress"]["asof"])
        return {
            "scenario.json": _document("stress-design", cfg, {"design": design.to_dict()}),
            "scenario_shifts.csv": design.shift_csv(),
        }
    start = _asof_index(panel, rolling.get("start")) if rolling.get("start") else sc.window
    end = _asof_index(panel, rolling.get("end"))
    asofs = list(range(start, end + 1, int(rolling.get("stride", 1))))
    if not asofs:
        raise ConfigError("rolling stress window selects no dates")
    track = design_rolling(panel, sc, asofs, cfg["jobs"])
    if not track.designs:
        raise NumericalError(f"every stress design failed; first: {track.failures[0]['error']}")
    for f in track.failures:
        log.warning("%s: %s", f["date"], f["error"])
    shifts = "".join(d.shift_csv().split("\n", 1)[1] for d in track.designs)
    return {
        "scenarios.json": _document("stress-design", cfg, {
            "designs": [d.to_dict() for d in track.designs], "failures": track.failures}),
        "scenario_shifts.csv": "asof,p_star,target_loss,risk_factor,shift\n" + shifts,
        "stress_plot_data.csv": track.plot_csv(),
    }


def cmd_gen_synth(cfg: dict) -> dict[str, str]:
    s = cfg["synth"]
    seed = cfg["seed"]
    if s["kind"] == "market":
        n = s["n_days"]
        if not isinstance(n, int) or n < 2:
            raise ConfigError("synth.n_days must be an integer >= 2")
        spec = oracle_lab.MarketSpec(seed=seed, n_days=n, switch_day=s["switch_day"])
        panel, regime = oracle_lab.gen_market_panel(spec)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", *panel.names])
        for i, d in enumerate(iter_dates(panel.dates)):
            w.writerow([d, *(repr(float(panel[c][i])) for c in panel.names)])
        truth = {"kind": "market", "regime": regime.tolist(), "dates": iter_dates(panel.dates)}
        return {"panel.csv": buf.getvalue(), "truth.json": _document("gen-synth", cfg, {"truth": truth})}
    T = s["T"]
    if not isinstance(T, int) or T < 1:
        raise ConfigError("synth.T must be a positive integer")
    try:
        spec = oracle_lab.SyntheticSpec(seed=seed, pi=s["pi"], mu=s["mu"], M=s["M"], theta=s["theta"],
                                        T=T, bivariate=tuple(s["bivariate"] or ()))
        ds = oracle_lab.gen_var_dataset(spec) if s["kind"] == "var" else oracle_lab.gen_stress_dataset(spec)
    except (ValueError, np.linalg.LinAlgError, KeyError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    fm = ds.features
    cols = [*fm.feature_names, "category"]
    extra = [ds.d]
    if s["kind"] == "stress":
        cols.append("loss")
        extra.append(ds.losses)
        for k, v in ds.shifts.items():
            cols.append(f"shift_{k}")
            extra.append(v)
    rows = [[d, *(repr(float(v)) for v in fm.x[i]), int(extra[0][i]), *(repr(float(e[i])) for e in extra[1:])]
            for i, d in enumerate(iter_dates(fm.dates))]
    return {"features.csv": _csv(["date", *cols], rows),
            "truth.json": _document("gen-synth", cfg, {"truth": oracle_lab.dataset_to_dict(ds)})}


COMMANDS = {
    "fit": cmd_fit,
    "var-backtest": cmd_var_backtest,
    "stress-design": cmd_stress_design,
    "gen-synth": cmd_gen_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker threads for per-date work")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--data", help="input CSV (overrides data.path)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="regime-risk", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"fit": "fit the regime model at one date",
             "var-backtest": "rolling VI / historical-simulation / Gaussian VaR backtest",
             "stress-design": "stress scenario target losses and risk factor shifts",
             "gen-synth": "write a synthetic dataset"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, {"seed": args.seed, "jobs": args.jobs,
                                               "output.dir": args.out, "data.path": args.data})
        files = COMMANDS[args.command](cfg)
        written = write_outputs(cfg["output"]["dir"], files)
    except RegimeRiskError as exc:
        print(f"regime-risk: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"regime-risk: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except (ValueError, KeyError) as exc:
        print(f"regime-risk: invalid input: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    for p in written:
        log.info("wrote %s", p)
    return 0
