"""Seeded simulators of the model's generative processes and brute-force
oracles used by the tests.

All randomness comes from ``numpy.random.default_rng`` (PCG64) seeded with
integer sequences, so streams can be split per purpose as ``[seed, tag]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .market_data import FeatureMatrix, TimeSeriesPanel

START_DATE = "2018-01-02"


def business_dates(n: int, start: str = START_DATE) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the regime/category generative process.

    ``schedule`` holds (start_index, overrides) pairs; from ``start_index``
    on, the keys present in ``overrides`` (``pi``, ``mu``, ``theta``) replace
    the base parameters. ``bivariate`` is used by ``gen_stress_dataset``: for
    each category a dict with ``loss_mean``, ``loss_std`` and per-risk-factor
    ``(shift_mean, shift_std, corr)`` triples under ``shifts``.
    """

    seed: int
    pi: np.ndarray
    mu: np.ndarray
    M: np.ndarray
    theta: np.ndarray
    T: int
    schedule: tuple = ()
    bivariate: tuple = ()

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        theta = np.asarray(self.theta, dtype=float)
        if self.T < 1:
            raise ValueError("T must be positive")
        K, n = mu.shape
        if pi.shape != (K,) or theta.ndim != 2 or theta.shape[0] != K or M.shape != (n, n):
            raise ValueError("inconsistent synthetic parameter shapes")
        for v in (pi, *theta):
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ValueError("pi and every theta_k must be simplices")
        np.linalg.cholesky(M)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "theta", theta)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return self.mu.shape[1]

    @property
    def J(self) -> int:
        return self.theta.shape[1]

    def params_at(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pi, mu, theta = self.pi, self.mu, self.theta
        for start, over in sorted(self.schedule, key=lambda s: s[0]):
            if t >= start:
                pi = np.asarray(over.get("pi", pi), dtype=float)
                mu = np.asarray(over.get("mu", mu), dtype=float).reshape(self.K, self.n)
                theta = np.asarray(over.get("theta", theta), dtype=float)
        return pi, mu, theta


@dataclass(frozen=True)
class VarDataset:
    features: FeatureMatrix
    d: np.ndarray       # outcome categories (0-based)
    c: np.ndarray       # true clusters


def _draw(spec: SyntheticSpec, rng: np.random.Generator):
    L = np.linalg.cholesky(spec.M)
    c = np.empty(spec.T, dtype=np.int64)
    d = np.empty(spec.T, dtype=np.int64)
    x = np.empty((spec.T, spec.n))
    z = rng.standard_normal((spec.T, spec.n))
    u_c = rng.random(spec.T)
    u_d = rng.random(spec.T)
    for t in range(spec.T):
        pi, mu, theta = spec.params_at(t)
        c[t] = min(np.searchsorted(np.cumsum(pi), u_c[t], side="right"), spec.K - 1)
        x[t] = mu[c[t]] + L @ z[t]
        d[t] = min(np.searchsorted(np.cumsum(theta[c[t]]), u_d[t], side="right"), spec.J - 1)
    return x, c, d


def gen_var_dataset(spec: SyntheticSpec) -> VarDataset:
    rng = np.random.default_rng([spec.seed, 10])
    x, c, d = _draw(spec, rng)
    names = tuple(f"x{i}" for i in range(spec.n))
    return VarDataset(FeatureMatrix(business_dates(spec.T), x, names), d, c)


@dataclass(frozen=True)
class StressDataset:
    features: FeatureMatrix
    d: np.ndarray
    c: np.ndarray
    losses: np.ndarray
    shifts: dict[str, np.ndarray]


def gen_stress_dataset(spec: SyntheticSpec) -> StressDataset:
    """Losses from N(mean_j, std_j^2); each shift from its conditional
    Gaussian given the drawn loss."""
    if len(spec.bivariate) != spec.J:
        raise ValueError("one bivariate parameter set per category required")
    rng = np.random.default_rng([spec.seed, 11])
    x, c, d = _draw(spec, rng)
    names = sorted({n for b in spec.bivariate for n in b["shifts"]})
    z_loss = rng.standard_normal(spec.T)
    z_shift = rng.standard_normal((spec.T, len(names)))
    losses = np.empty(spec.T)
    shifts = {n: np.empty(spec.T) for n in names}
    for t in range(spec.T):
        b = spec.bivariate[d[t]]
        losses[t] = b["loss_mean"] + b["loss_std"] * z_loss[t]
        for i, n in enumerate(names):
            m, s, rho = b["shifts"][n]
            if b["loss_std"] > 0:
                shifts[n][t] = m + rho * s * z_loss[t] + s * np.sqrt(1 - rho * rho) * z_shift[t, i]
            else:
                shifts[n][t] = m + s * z_shift[t, i]
    fm = FeatureMatrix(business_dates(spec.T), x, tuple(f"x{i}" for i in range(spec.n)))
    return StressDataset(fm, d, c, losses, shifts)


# --------------------------------------------------------------------------
# brute-force oracles
# --------------------------------------------------------------------------

def brute_force_peak_loss(value_path, L: int, H: int, t: int, key_values=None,
                          constraint=None):
    """Exhaustive scan of every (start, end) window; None if nothing is eligible.

    Strict improvement while scanning starts then ends in increasing order
    gives the earliest-start, earliest-end tie-break.
    """
    V = [float(v) for v in value_path]
    best = None
    for s in range(t, t + H):
        for e in range(s + 1, min(s + L, t + H) + 1):
            if e >= len(V):
                continue
            if constraint is not None:
                a, b = float(key_values[s]), float(key_values[e])
                shift = b - a if constraint.mode == "difference" else b / a - 1.0
                ok = shift >= constraint.threshold if constraint.direction == "ge" else shift <= constraint.threshold
                if not ok:
                    continue
            pnl = V[e] - V[s]
            if best is None or pnl < best[0]:
                best = (pnl, s, e)
    return best


def brute_force_weighted_var(outcomes, probabilities, confidence: float) -> float:
    """inf{x : P(loss > x) <= 1 - confidence} by scanning every candidate loss."""
    losses = [-float(o) for o in outcomes]
    probs = [float(p) for p in probabilities]
    for x in sorted(set(losses)):
        exceed = sum(p for l, p in zip(losses, probs) if l > x)
        if exceed <= 1.0 - confidence + 1e-12:
            return x
    return max(losses)


# --------------------------------------------------------------------------
# synthetic market panel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketSpec:
    """Calm/stressed market with an optional permanent switch to stress.

    Before ``switch_day`` the regime follows a two-state Markov chain that
    produces short stress bursts; from ``switch_day`` on the market stays
    stressed. Set ``switch_day`` past the end for a stationary panel.
    """

    seed: int = 0
    n_days: int = 600
    switch_day: int = 400
    p_calm_to_stress: float = 0.02
    p_stress_to_calm: float = 0.10
    equity_vol: tuple[float, float] = (0.006, 0.025)
    equity_drift: tuple[float, float] = (0.0004, -0.002)
    rate_vol: tuple[float, float] = (0.03, 0.08)      # percentage points per day
    rate_equity_corr: float = 0.4
    vix_level: tuple[float, float] = (14.0, 35.0)
    vix_speed: float = 0.15
    fx_vol: tuple[float, float] = (0.004, 0.009)


def gen_market_panel(spec: MarketSpec = MarketSpec()) -> tuple[TimeSeriesPanel, np.ndarray]:
    """Levels of SPX, UST10Y (percent), VIX, USDJPY, DXY and the true regime path."""
    rng = np.random.default_rng([spec.seed, 20])
    n = spec.n_days
    regime = np.zeros(n, dtype=np.int64)
    u = rng.random(n)
    for t in range(1, n):
        if t >= spec.switch_day:
            regime[t] = 1
        elif regime[t - 1] == 0:
            regime[t] = int(u[t] < spec.p_calm_to_stress)
        else:
            regime[t] = int(u[t] >= spec.p_stress_to_calm)
    z = rng.standard_normal((n, 5))
    ev, ed = np.array(spec.equity_vol)[regime], np.array(spec.equity_drift)[regime]
    rv, fv = np.array(spec.rate_vol)[regime], np.array(spec.fx_vol)[regime]
    vt = np.array(spec.vix_level)[regime]
    rho = spec.rate_equity_corr
    r_eq = ed + ev * z[:, 0]
    d_rate = rv * (rho * z[:, 0] + np.sqrt(1 - rho * rho) * z[:, 1])
    r_jpy = fv * (0.3 * z[:, 0] + np.sqrt(1 - 0.09) * z[:, 2])
    r_dxy = 0.5 * fv * (-0.2 * z[:, 0] + np.sqrt(1 - 0.04) * z[:, 3])
    r_eq[0] = d_rate[0] = r_jpy[0] = r_dxy[0] = 0.0
    spx = 3000.0 * np.cumprod(1.0 + r_eq)
    ust = np.maximum(1.8 + np.cumsum(d_rate), 0.05)
    vix = np.empty(n)
    vix[0] = spec.vix_level[0]
    for t in range(1, n):
        step = spec.vix_speed * (vt[t] - vix[t - 1]) + 1.5 * z[t, 4] - 100.0 * r_eq[t]
        vix[t] = max(vix[t - 1] + step, 9.0)
    usdjpy = 110.0 * np.cumprod(1.0 + r_jpy)
    dxy = 95.0 * np.cumprod(1.0 + r_dxy)
    panel = TimeSeriesPanel(business_dates(n), {"SPX": spx, "UST10Y": ust, "VIX": vix,
                                                "USDJPY": usdjpy, "DXY": dxy})
    return panel, regime


def dataset_to_dict(ds: VarDataset | StressDataset) -> dict:
    out = {"dates": [str(d) for d in ds.features.dates], "cluster": ds.c.tolist(), "category": ds.d.tolist()}
    if isinstance(ds, StressDataset):
        out["losses"] = ds.losses.tolist()
        out["shifts"] = {k: v.tolist() for k, v in ds.shifts.items()}
    return out


def dump_features_csv(fm: FeatureMatrix, path, extra: Mapping[str, Sequence] | None = None) -> None:
    panel = TimeSeriesPanel(fm.dates, {**{n: fm.x[:, i] for i, n in enumerate(fm.feature_names)},
                                       **{k: np.asarray(v, float) for k, v in (extra or {}).items()}})
    panel.to_csv(path)
