"""Regime-weighted historical-simulation VaR and rolling backtests.

The historical-simulation vector is split into J outcome categories by the
z-score of each P&L against the vector's own mean and standard deviation.
Category probabilities predicted by the variational fit are spread evenly
over the outcomes inside each category, and VaR is read off the resulting
discrete distribution.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import vi_core
from .vi_core import VIConfig
from .errors import DataError
from .market_data import (FeatureMatrix, FeatureSpec, HistRetVector, Portfolio, TimeSeriesPanel,
                          build_features, simulate_hist_returns)
from .special import norm_ppf

_CDF_TOL = 1e-12


@dataclass(frozen=True)
class PnlCategorySpec:
    """J half-open buckets [b_{j-1}, b_j) with b_0 = -inf and b_J = +inf.

    ``thresholds`` are the J-1 interior bounds; ``normalization`` is
    ``"zscore"`` (bounds in z units) or ``"raw"`` (bounds in P&L units).
    """

    thresholds: tuple[float, ...] = (-0.8, 0.8)
    normalization: str = "zscore"

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if any(not math.isfinite(t) for t in th):
            raise ValueError("category thresholds must be finite")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("category thresholds must be strictly increasing")
        if self.normalization not in ("zscore", "raw"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "thresholds", th)

    @property
    def J(self) -> int:
        return len(self.thresholds) + 1

    def categorize(self, values) -> np.ndarray:
        return np.searchsorted(np.asarray(self.thresholds), np.asarray(values, dtype=float), side="right")


@dataclass(frozen=True)
class Normalizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def from_values(cls, values) -> "Normalizer":
        v = np.asarray(values, dtype=float)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return cls(float(v.mean()), std)

    def __call__(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if self.std < 1e-12:
            return np.zeros_like(v)
        return (v - self.mean) / self.std


def _normalize(values, spec: PnlCategorySpec, normalizer: Normalizer | None):
    if spec.normalization == "raw":
        return np.asarray(values, dtype=float)
    if normalizer is None:
        normalizer = Normalizer.from_values(values)
    return normalizer(values)


@dataclass(frozen=True)
class EmpiricalCategoryDist:
    pnl: np.ndarray         # the T outcomes in original order
    labels: np.ndarray      # category of each outcome
    J: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.J)

    def members(self, j: int) -> np.ndarray:
        return self.pnl[self.labels == j]


def bucket_returns(hist: HistRetVector | np.ndarray, spec: PnlCategorySpec,
                   normalizer: Normalizer | None = None) -> EmpiricalCategoryDist:
    """Split the historical P&L into categories; the default normalizer is
    the vector's own mean and sample std."""
    pnl = np.asarray(hist.pnl if isinstance(hist, HistRetVector) else hist, dtype=float)
    if pnl.size == 0:
        raise ValueError("historical P&L vector is empty")
    labels = spec.categorize(_normalize(pnl, spec, normalizer))
    return EmpiricalCategoryDist(pnl.copy(), labels, spec.J)


def label_outcomes(pnl_forward, spec: PnlCategorySpec, normalizer: Normalizer | None = None,
                   trailing_window: int | None = None) -> np.ndarray:
    """Category of each realised forward P&L; -1 where it cannot be labelled.

    With ``trailing_window`` each value is z-scored against the trailing
    window of forward P&L ending at it (inclusive); otherwise the fixed
    ``normalizer`` is used. NaN inputs (forward P&L not yet realised) stay
    unlabelled.
    """
    v = np.asarray(pnl_forward, dtype=float)
    out = np.full(v.shape, -1, dtype=np.int64)
    if trailing_window is not None and spec.normalization == "zscore":
        from .market_data import rolling_zscore
        z = rolling_zscore(v, trailing_window)
    else:
        z = _normalize(v, spec, normalizer)
    ok = np.isfinite(z)
    out[ok] = spec.categorize(z[ok])
    return out


@dataclass(frozen=True)
class WeightedPnlDistribution:
    outcomes: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.outcomes, dtype=float)
        p = np.asarray(self.probabilities, dtype=float)
        if o.shape != p.shape or o.ndim != 1 or o.size == 0:
            raise ValueError("outcomes and probabilities must be matching nonempty vectors")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be a distribution")
        object.__setattr__(self, "outcomes", o)
        object.__setattr__(self, "probabilities", p)


def redistribute_empty(cat_probs, counts) -> np.ndarray:
    """Move the mass of empty categories pro rata onto the nonempty ones.

    If every nonempty category has zero mass the empirical frequencies are
    used instead.
    """
    p = np.asarray(cat_probs, dtype=float)
    n = np.asarray(counts)
    live = n > 0
    if not live.any():
        raise ValueError("all categories are empty")
    out = np.where(live, p, 0.0)
    tot = out.sum()
    if tot <= 0.0:
        out = np.where(live, n, 0).astype(float)
        tot = out.sum()
    return out / tot


def weighted_distribution(cat_probs, dist: EmpiricalCategoryDist) -> WeightedPnlDistribution:
    p = np.asarray(cat_probs, dtype=float)
    if p.shape != (dist.J,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("category probabilities must be a J-simplex")
    counts = dist.counts
    p = redistribute_empty(p, counts)
    per = np.divide(p, counts, out=np.zeros_like(p), where=counts > 0)
    probs = per[dist.labels]
    return WeightedPnlDistribution(dist.pnl, probs / probs.sum())


def var_quantile(dist: WeightedPnlDistribution, confidence: float) -> float:
    """Smallest loss x with P(loss > x) <= 1 - confidence (losses = -P&L)."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    losses = -dist.outcomes
    order = np.argsort(losses, kind="stable")
    cum = np.cumsum(dist.probabilities[order])
    k = int(np.searchsorted(cum, confidence - _CDF_TOL, side="left"))
    k = min(k, losses.size - 1)
    return float(losses[order[k]])


def hs_var(hist: HistRetVector | np.ndarray, confidence: float) -> float:
    pnl = np.asarray(hist.pnl if isinstance(hist, HistRetVector) else hist, dtype=float)
    return var_quantile(WeightedPnlDistribution(pnl, np.full(pnl.size, 1.0 / pnl.size)), confidence)


def gaussian_var(hist: HistRetVector | np.ndarray, confidence: float, zero_mean: bool = False) -> float:
    pnl = np.asarray(hist.pnl if isinstance(hist, HistRetVector) else hist, dtype=float)
    if pnl.size < 2:
        raise ValueError("Gaussian VaR needs at least two observations")
    mean = 0.0 if zero_mean else float(pnl.mean())
    std = float(pnl.std(ddof=1))
    if std == 0.0:
        return -mean
    return -(mean + norm_ppf(1.0 - confidence) * std)


# --------------------------------------------------------------------------
# backtest
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VarConfig:
    portfolio: Portfolio
    features: tuple[FeatureSpec, ...]
    D: int = 1
    T: int = 250
    confidences: tuple[float, ...] = (0.95, 0.975)
    categories: PnlCategorySpec = field(default_factory=PnlCategorySpec)
    vi: VIConfig = field(default_factory=VIConfig)
    gaussian_zero_mean: bool = False
    stride: int = 1
    start: str | None = None
    end: str | None = None
    seed: int = 0
    jobs: int = 1


@dataclass
class DateResult:
    date: str
    realized: float
    var: dict[str, dict[float, float]]
    cluster_probs: list[float]
    category_probs: list[float]
    category_counts: list[int]
    converged: bool
    error: str | None = None


@dataclass
class BacktestReport:
    confidences: tuple[float, ...]
    rows: list[DateResult]
    failures: list[dict] = field(default_factory=list)

    METHODS = ("vi", "hs", "gaussian")

    def dates(self) -> list[str]:
        return [r.date for r in self.rows]

    def series(self, method: str, confidence: float) -> np.ndarray:
        return np.array([r.var[method][confidence] for r in self.rows])

    def realized(self) -> np.ndarray:
        return np.array([r.realized for r in self.rows])

    def breaches(self, method: str, confidence: float) -> np.ndarray:
        return -self.realized() > self.series(method, confidence)

    def breach_rates(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in self.METHODS:
            out[m] = {str(c): float(self.breaches(m, c).mean()) if self.rows else math.nan
                      for c in self.confidences}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", "method", "confidence", "var", "realized_pnl", "breach"])
        for r in self.rows:
            for m in self.METHODS:
                for c in self.confidences:
                    v = r.var[m][c]
                    w.writerow([r.date, m, repr(c), repr(v), repr(r.realized), int(-r.realized > v)])
        return buf.getvalue()

    def plot_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = [f"{m}_var_{c}" for c in self.confidences for m in self.METHODS]
        w.writerow(["date", "realized_pnl", *cols])
        for r in self.rows:
            w.writerow([r.date, repr(r.realized),
                        *(repr(r.var[m][c]) for c in self.confidences for m in self.METHODS)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "format": "regime_risk/var-backtest",
            "version": 1,
            "confidences": list(self.confidences),
            "breach_rates": self.breach_rates(),
            "dates": {
                r.date: {
                    "realized_pnl": r.realized,
                    "var": {m: {str(c): v for c, v in r.var[m].items()} for m in self.METHODS},
                    "breach": {m: {str(c): bool(-r.realized > v) for c, v in r.var[m].items()}
                               for m in self.METHODS},
                    "cluster_probs": r.cluster_probs,
                    "category_probs": r.category_probs,
                    "category_counts": r.category_counts,
                    "converged": r.converged,
                } for r in self.rows
            },
            "failures": self.failures,
        }


def regime_var(hist: HistRetVector, x_obs: np.ndarray, x_now: np.ndarray, spec: PnlCategorySpec,
               vi: VIConfig, seed: int):
    """Fit on (feature, outcome-category) pairs and weight ``hist`` by the
    predicted category probabilities at ``x_now``.

    Row i of ``x_obs`` must be the feature vector at the start of the window
    behind ``hist.pnl[i]``. Returns the weighted distribution plus the
    fitted objects.
    """
    dist = bucket_returns(hist, spec)
    obs = vi_core.ObservationSet(x_obs, dist.labels)
    hyper = vi.hyperparams(x_obs, spec.J, seed)
    state = vi_core.cavi_fit(obs, hyper, vi.options(seed))
    q = vi_core.predictive_cluster_probs(x_now, hyper, state)
    p = vi_core.predictive_category_probs(x_now, hyper, state)
    return weighted_distribution(p, dist), dist, q, p, state


def backtest_dates(panel: TimeSeriesPanel, feats: FeatureMatrix, cfg: VarConfig) -> list[int]:
    """Panel indices with enough history behind them and a realised forward P&L."""
    avail = np.isin(panel.dates, feats.dates)
    first_feat = int(np.argmax(avail))
    lo = max(cfg.T + cfg.D, first_feat + cfg.T + cfg.D)
    hi = len(panel) - 1 - cfg.D
    idx = [t for t in range(lo, hi + 1) if avail[t]]
    if cfg.start is not None:
        idx = [t for t in idx if panel.dates[t] >= np.datetime64(cfg.start, "D")]
    if cfg.end is not None:
        idx = [t for t in idx if panel.dates[t] <= np.datetime64(cfg.end, "D")]
    return idx[:: max(1, cfg.stride)]


def _one_date(t, panel, feats, pos, cfg: VarConfig) -> DateResult:
    hist = simulate_hist_returns(panel, cfg.portfolio, cfg.D, cfg.T, t)
    starts = t - cfg.D - np.arange(1, cfg.T + 1)
    rows = pos[starts]
    if np.any(rows < 0) or pos[t] < 0:
        raise DataError("features unavailable inside the calibration window")
    seed = int(np.random.SeedSequence([cfg.seed, t]).generate_state(1)[0])
    wdist, dist, q, p, state = regime_var(hist, feats.x[rows], feats.x[pos[t]], cfg.categories, cfg.vi, seed)
    realized = float(cfg.portfolio.pnl(panel, t, t + cfg.D))
    var = {
        "vi": {c: var_quantile(wdist, c) for c in cfg.confidences},
        "hs": {c: hs_var(hist, c) for c in cfg.confidences},
        "gaussian": {c: gaussian_var(hist, c, cfg.gaussian_zero_mean) for c in cfg.confidences},
    }
    return DateResult(str(panel.dates[t]), realized, var, q.tolist(), p.tolist(),
                      dist.counts.tolist(), bool(state.converged))


def var_backtest(panel: TimeSeriesPanel, cfg: VarConfig) -> BacktestReport:
    """Refit and evaluate VI, historical-simulation and Gaussian VaR per date."""
    if len(panel) == 0:
        raise DataError("empty panel")
    cfg.portfolio.check(panel)
    feats = build_features(panel, cfg.features)
    pos = np.full(len(panel), -1)
    pos[np.searchsorted(panel.dates, feats.dates)] = np.arange(len(feats))
    dates = backtest_dates(panel, feats, cfg)
    if not dates:
        raise DataError("not enough history for a single backtest date")

    def run(t):
        try:
            return _one_date(t, panel, feats, pos, cfg)
        except Exception as exc:  # recorded per date, run continues
            return {"date": str(panel.dates[t]), "error": f"{type(exc).__name__}: {exc}"}

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            results = list(ex.map(run, dates))
    else:
        results = [run(t) for t in dates]
    rows = [r for r in results if isinstance(r, DateResult)]
    failures = [r for r in results if not isinstance(r, DateResult)]
    return BacktestReport(tuple(cfg.confidences), rows, failures)


def report_json(report: BacktestReport, **kw) -> str:
    return json.dumps(report.to_dict(), **kw)
