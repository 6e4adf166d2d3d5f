"""Stress scenario design from near-term peak losses.

For each historical date t the peak loss Loss^t_{L,H} is the worst P&L of
the portfolio over any window of at most L days starting within the next H
days. Records are classified into stress categories (loss severity, possibly
crossed with the direction of a key risk factor), each category gets a loss
Gaussian and a loss/shift bivariate Gaussian per risk factor, and the
category probabilities predicted by the variational fit turn these into a
loss mixture. The target loss is a quantile of that mixture and the expected
risk factor shifts are the category-weighted conditional means at it.

Losses are signed P&L throughout (negative = loss).
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from . import vi_core
from .errors import ConfigError, DataError
from .market_data import FeatureSpec, Portfolio, TimeSeriesPanel, build_features
from .var_engine import redistribute_empty
from .vi_core import VIConfig

LOW_CONFIDENCE_COUNT = 5


# --------------------------------------------------------------------------
# peak losses
# --------------------------------------------------------------------------

def shift_values(start, end, mode: str = "difference"):
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if mode == "difference":
        return end - start
    if mode == "relative":
        if np.any(start == 0):
            raise DataError("relative shift from a zero level")
        return end / start - 1.0
    raise ValueError(f"unknown shift mode {mode!r}")


@dataclass(frozen=True)
class ShiftConstraint:
    """Keep only windows whose key risk factor shift is >= (``ge``) or <=
    (``le``) ``threshold``."""

    risk_factor: str
    direction: str = "ge"
    threshold: float = 0.0
    mode: str = "difference"

    def __post_init__(self):
        if self.direction not in ("ge", "le"):
            raise ValueError("constraint direction must be 'ge' or 'le'")
        if self.mode not in ("difference", "relative"):
            raise ValueError(f"unknown shift mode {self.mode!r}")
        if math.isnan(self.threshold):
            raise ValueError("constraint threshold is NaN")

    def eligible(self, shift) -> np.ndarray:
        shift = np.asarray(shift, dtype=float)
        return shift >= self.threshold if self.direction == "ge" else shift <= self.threshold

    def describe(self) -> str:
        op = ">=" if self.direction == "ge" else "<="
        return f"{self.risk_factor} {self.mode} shift {op} {self.threshold!r}"


@dataclass(frozen=True)
class PeakLossRecord:
    t: int
    loss: float
    start: int
    end: int
    shifts: Mapping[str, float] = field(default_factory=dict)


@dataclass
class PeakLossSurface:
    records: list[PeakLossRecord]
    omitted: list[int] = field(default_factory=list)   # t with no eligible window
    status: str = "ok"


def _window_matrix(values: np.ndarray, L: int, fn) -> np.ndarray:
    """N x L matrix whose (s, l-1) entry is fn(v[s], v[s+l]); NaN past the end."""
    N = values.size
    out = np.full((N, L), np.nan)
    for l in range(1, min(L, N - 1) + 1):
        out[: N - l, l - 1] = fn(values[: N - l], values[l:])
    return out


def _surface(value_path, L: int, H: int, eligible: np.ndarray | None = None):
    V = np.asarray(value_path, dtype=float)
    if L < 1 or H < 1:
        raise ValueError("L and H must be positive")
    if V.ndim != 1 or V.size <= H:
        raise DataError(f"value path needs more than H={H} points")
    if not np.all(np.isfinite(V)):
        raise DataError("value path has non-finite entries")
    N = V.size
    diffs = _window_matrix(V, L, lambda a, b: b - a)
    ok = np.isfinite(diffs)
    if eligible is not None:
        ok &= eligible
    diffs = np.where(ok, diffs, np.inf)
    # for start offset s' and length l the window stays inside the horizon iff s' + l <= H
    inside = np.add.outer(np.arange(H), np.arange(1, L + 1)) <= H
    blocks = sliding_window_view(diffs, (H, L))[: N - H, 0]
    flat = np.where(inside, blocks, np.inf).reshape(N - H, H * L)
    # row-major argmin = earliest start, then earliest end
    best = np.argmin(flat, axis=1)
    loss = flat[np.arange(N - H), best]
    t = np.arange(N - H)
    start = t + best // L
    end = start + best % L + 1
    return loss, start, end


def peak_loss_surface(value_path, L: int, H: int) -> list[PeakLossRecord]:
    """Loss^t_{L,H} for every t with a full horizon (t + H inside the path)."""
    loss, start, end = _surface(value_path, L, H)
    return [PeakLossRecord(int(t), float(x), int(s), int(e))
            for t, (x, s, e) in enumerate(zip(loss, start, end))]


def constrained_peak_loss_surface(value_path, key_values, L: int, H: int,
                                  constraint: ShiftConstraint) -> PeakLossSurface:
    """Peak losses restricted to windows whose key shift satisfies ``constraint``.

    ``key_values`` is the key risk factor aligned with ``value_path``.
    """
    key = np.asarray(key_values, dtype=float)
    if key.shape != np.shape(value_path):
        raise DataError("key risk factor must align with the value path")
    with np.errstate(divide="ignore", invalid="ignore"):
        shifts = _window_matrix(key, L, lambda a, b: shift_values(a, b, constraint.mode))
    eligible = np.isfinite(shifts) & constraint.eligible(np.nan_to_num(shifts, nan=0.0))
    loss, start, end = _surface(value_path, L, H, eligible)
    records, omitted = [], []
    for t, (x, s, e) in enumerate(zip(loss, start, end)):
        if np.isfinite(x):
            records.append(PeakLossRecord(t, float(x), int(s), int(e)))
        else:
            omitted.append(t)
    status = "ok" if records else "infeasible: constraint eliminates every window"
    return PeakLossSurface(records, omitted, status)


def extract_rf_shifts(panel: TimeSeriesPanel, records: Sequence[PeakLossRecord],
                      rf_rules: Mapping[str, str], offset: int = 0) -> list[PeakLossRecord]:
    """Fill each record's risk-factor shifts over its realizing window.

    Record indices are relative to ``panel`` position ``offset``.
    """
    missing = [name for name in rf_rules if name not in panel.series]
    if missing:
        raise DataError(f"unknown risk factors {missing}")
    if not records:
        return []
    s = np.array([r.start for r in records]) + offset
    e = np.array([r.end for r in records]) + offset
    if s.min() < 0 or e.max() >= len(panel):
        raise DataError("record window outside the panel")
    cols = {name: shift_values(panel[name][s], panel[name][e], mode) for name, mode in rf_rules.items()}
    return [replace(r, shifts={name: float(c[i]) for name, c in cols.items()})
            for i, r in enumerate(records)]


# --------------------------------------------------------------------------
# categories
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StressCategorySpec:
    """Loss-severity cells inside key-shift bands.

    ``key_thresholds`` split the key shift axis into half-open bands
    [k_{b-1}, k_b); ``loss_thresholds[b]`` split the loss axis inside band b.
    Categories are numbered band by band, most severe loss first, so the
    cells partition the plane by construction. Without a key factor there is
    a single band.
    """

    loss_thresholds: tuple[tuple[float, ...], ...] = ((),)
    key_thresholds: tuple[float, ...] = ()
    key_factor: str | None = None

    def __post_init__(self):
        kt = tuple(float(v) for v in self.key_thresholds)
        lt = tuple(tuple(float(v) for v in band) for band in self.loss_thresholds)
        if len(lt) != len(kt) + 1:
            raise ValueError("need one loss-threshold list per key band")
        if kt and self.key_factor is None:
            raise ValueError("key thresholds given without a key risk factor")
        if any(b <= a for a, b in zip(kt, kt[1:])):
            raise ValueError("key thresholds must be strictly increasing")
        for band in lt:
            if any(b < a for a, b in zip(band, band[1:])):
                raise ValueError("loss thresholds must be nondecreasing")
        if not all(math.isfinite(v) for v in kt + sum(lt, ())):
            raise ValueError("category thresholds must be finite")
        object.__setattr__(self, "key_thresholds", kt)
        object.__setattr__(self, "loss_thresholds", lt)

    @property
    def J(self) -> int:
        return sum(len(b) + 1 for b in self.loss_thresholds)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(b) + 1 for b in self.loss_thresholds])[:-1]])

    def classify(self, losses, key_shifts=None) -> np.ndarray:
        losses = np.asarray(losses, dtype=float)
        if self.key_factor is None:
            band = np.zeros(losses.shape, dtype=np.int64)
        else:
            if key_shifts is None:
                raise ValueError("key shifts required for banded categories")
            band = np.searchsorted(self.key_thresholds, np.asarray(key_shifts, dtype=float), side="right")
        cell = np.array([np.searchsorted(self.loss_thresholds[b], x, side="right")
                         for b, x in zip(band.ravel(), losses.ravel())], dtype=np.int64)
        return self.offsets[band.ravel()] + cell

    def describe(self) -> list[dict]:
        out = []
        edges = (-math.inf, *self.key_thresholds, math.inf)
        for b, band in enumerate(self.loss_thresholds):
            ledges = (-math.inf, *band, math.inf)
            for c in range(len(band) + 1):
                out.append({"key_shift": [edges[b], edges[b + 1]] if self.key_factor else None,
                            "loss": [ledges[c], ledges[c + 1]]})
        return out


@dataclass(frozen=True)
class QuantileGrid:
    """Category grid whose loss cuts are quantiles of the calibration losses
    within each key band."""

    quantiles: tuple[tuple[float, ...], ...] = ((0.2, 0.4, 0.6, 0.8), (1 / 3, 2 / 3))
    key_thresholds: tuple[float, ...] = (0.0,)
    key_factor: str | None = "UST10Y"

    def __post_init__(self):
        for band in self.quantiles:
            if any(not 0.0 < q < 1.0 for q in band) or list(band) != sorted(band):
                raise ValueError("grid quantiles must be increasing and inside (0, 1)")

    @property
    def J(self) -> int:
        return sum(len(b) + 1 for b in self.quantiles)

    def resolve(self, records: Sequence[PeakLossRecord]) -> StressCategorySpec:
        losses = np.array([r.loss for r in records])
        if self.key_factor is None:
            band = np.zeros(len(records), dtype=np.int64)
        else:
            keys = np.array([r.shifts[self.key_factor] for r in records])
            band = np.searchsorted(np.asarray(self.key_thresholds, float), keys, side="right")
        cuts = []
        for b, qs in enumerate(self.quantiles):
            # overlapping horizons repeat the same realizing window, so cut on
            # distinct loss values to keep the cells populated
            pool = np.unique(losses[band == b])
            if pool.size == 0:
                pool = np.unique(losses)
            cuts.append(tuple(np.quantile(pool, qs)) if qs else ())
        return StressCategorySpec(tuple(cuts), self.key_thresholds if self.key_factor else (), self.key_factor)


def classify_stress(records: Sequence[PeakLossRecord], spec: StressCategorySpec) -> np.ndarray:
    losses = [r.loss for r in records]
    keys = [r.shifts[spec.key_factor] for r in records] if spec.key_factor else None
    return spec.classify(losses, keys)


# --------------------------------------------------------------------------
# per-category fits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CategoryLossGaussian:
    mean: float
    std: float
    count: int
    flags: tuple[str, ...] = ()

    @property
    def fitted(self) -> bool:
        return self.count > 0


def sigma_floor(losses) -> float:
    losses = np.asarray(losses, dtype=float)
    overall = float(losses.std(ddof=1)) if losses.size > 1 else 0.0
    return max(1e-6 * overall, 1e-12)


def fit_category_gaussians(losses, labels, J: int) -> list[CategoryLossGaussian]:
    losses = np.asarray(losses, dtype=float)
    labels = np.asarray(labels)
    if losses.size == 0:
        raise DataError("no stress records to fit")
    floor = sigma_floor(losses)
    out = []
    for j in range(J):
        v = losses[labels == j]
        if v.size == 0:
            out.append(CategoryLossGaussian(math.nan, math.nan, 0, ("unfitted",)))
            continue
        flags = []
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        if v.size < 2:
            flags.append("single_record")
        if std < floor:
            std = floor
            flags.append("sigma_floored")
        if v.size < LOW_CONFIDENCE_COUNT:
            flags.append("low_confidence")
        out.append(CategoryLossGaussian(float(v.mean()), std, int(v.size), tuple(flags)))
    return out


@dataclass(frozen=True)
class BivariateFit:
    """Sample moments of (loss X, shift Y) in one category."""

    x_mean: float
    y_mean: float
    sxx: float
    syy: float
    sxy: float
    count: int

    @property
    def degenerate(self) -> bool:
        return self.count < 2 or not self.sxx > 0.0


def fit_bivariate(losses, shifts, labels, J: int) -> list[BivariateFit]:
    x = np.asarray(losses, dtype=float)
    y = np.asarray(shifts, dtype=float)
    labels = np.asarray(labels)
    out = []
    for j in range(J):
        m = labels == j
        n = int(m.sum())
        if n == 0:
            out.append(BivariateFit(math.nan, math.nan, math.nan, math.nan, math.nan, 0))
            continue
        xj, yj = x[m], y[m]
        if n == 1:
            out.append(BivariateFit(float(xj[0]), float(yj[0]), 0.0, 0.0, 0.0, 1))
            continue
        dx, dy = xj - xj.mean(), yj - yj.mean()
        out.append(BivariateFit(float(xj.mean()), float(yj.mean()), float(dx @ dx / (n - 1)),
                                float(dy @ dy / (n - 1)), float(dx @ dy / (n - 1)), n))
    return out


def conditional_shift(fit: BivariateFit, loss_value: float) -> float:
    """E[Y | X = loss_value]; the plain mean of Y when Var(X) is zero."""
    if fit.count == 0:
        raise ValueError("conditional shift of an empty category")
    if not fit.sxx > 0.0:
        return fit.y_mean
    return fit.y_mean + fit.sxy / fit.sxx * (loss_value - fit.x_mean)


def scenario_shifts(cat_probs, fits: Mapping[str, Sequence[BivariateFit]], L_star: float) -> dict[str, float]:
    p = np.asarray(cat_probs, dtype=float)
    out = {}
    for name, per_cat in fits.items():
        if len(per_cat) != p.size:
            raise ValueError("one bivariate fit per category required")
        total = 0.0
        for pj, fit in zip(p, per_cat):
            if pj > 0.0:
                total += pj * conditional_shift(fit, L_star)
        out[name] = float(total)
    return out


# --------------------------------------------------------------------------
# loss mixture
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        s = np.asarray(self.stds, dtype=float)
        if not (w.shape == m.shape == s.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("mixture parameters must be matching nonempty vectors")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a distribution")
        if np.any(~(s > 0)) or not np.all(np.isfinite(m)):
            raise ValueError("mixture components need finite means and positive stds")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.stds
        return np.sum(self.weights * ndtr(z), axis=-1)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.stds
        return np.sum(self.weights * np.exp(-0.5 * z * z) / (self.stds * math.sqrt(2 * math.pi)), axis=-1)


def loss_distribution(cat_probs, gaussians: Sequence[CategoryLossGaussian]) -> GaussianMixture:
    """Mixture of the category loss Gaussians; mass on unfitted categories is
    moved pro rata onto the fitted ones."""
    p = np.asarray(cat_probs, dtype=float)
    if p.size != len(gaussians) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("category probabilities must be a simplex over the categories")
    counts = np.array([g.count for g in gaussians])
    if not np.any(counts > 0):
        raise DataError("no fitted stress category")
    w = redistribute_empty(p, counts)
    keep = w > 0
    return GaussianMixture(w[keep], np.array([g.mean for g in gaussians])[keep],
                           np.array([g.std for g in gaussians])[keep])


def target_loss(mixture: GaussianMixture, p_star: float) -> float:
    """L* with mixture CDF(L*) = 1 - p_star (bisection)."""
    if not 0.0 < p_star < 1.0:
        raise ValueError("p_star must lie in (0, 1)")
    target = 1.0 - p_star
    lo = float(np.min(mixture.means - 40 * mixture.stds))
    hi = float(np.max(mixture.means + 40 * mixture.stds))
    while mixture.cdf(lo) > target:
        lo -= hi - lo
    while mixture.cdf(hi) < target:
        hi += hi - lo
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        c = float(mixture.cdf(mid))
        if abs(c - target) < 1e-12:
            return mid
        if c < target:
            lo = mid
        else:
            hi = mid
    return lo if abs(mixture.cdf(lo) - target) <= abs(mixture.cdf(hi) - target) else hi


# --------------------------------------------------------------------------
# scenario design
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StressConfig:
    portfolio: Portfolio
    features: tuple[FeatureSpec, ...]
    risk_factors: Mapping[str, str]          # name -> shift mode
    categories: StressCategorySpec | QuantileGrid = field(default_factory=QuantileGrid)
    L: int = 15
    H: int = 45
    window: int = 1000
    p_stars: tuple[float, ...] = (0.75, 0.95)
    vi: VIConfig = field(default_factory=lambda: VIConfig(K=4))
    constraint: ShiftConstraint | None = None
    record_stride: int = 1
    seed: int = 0


@dataclass
class ScenarioResult:
    p_star: float
    target_loss: float
    shifts: dict[str, float]
    category_probs: list[float]
    cluster_probs: list[float]
    constraint: str | None = None

    def to_dict(self) -> dict:
        return {
            "p_star": self.p_star,
            "target_loss": self.target_loss,
            "target_loss_magnitude": -self.target_loss,
            "shifts": self.shifts,
            "category_probs": self.category_probs,
            "cluster_probs": self.cluster_probs,
            "constraint": self.constraint,
        }


@dataclass
class ScenarioDesign:
    asof: str
    results: list[ScenarioResult]
    diagnostics: dict

    def to_dict(self) -> dict:
        return {"asof": self.asof, "scenarios": [r.to_dict() for r in self.results],
                "diagnostics": self.diagnostics}

    def shift_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["asof", "p_star", "target_loss", "risk_factor", "shift"])
        for r in self.results:
            for name, v in r.shifts.items():
                w.writerow([self.asof, repr(r.p_star), repr(r.target_loss), name, repr(v)])
        return buf.getvalue()


def _resolve_asof(panel: TimeSeriesPanel, asof) -> int:
    if asof is None:
        return len(panel) - 1
    if isinstance(asof, (int, np.integer)):
        t = int(asof)
        if not 0 <= t < len(panel):
            raise DataError(f"asof index {t} outside the panel")
        return t
    return panel.index_of(asof)


def calibration_records(panel: TimeSeriesPanel, cfg: StressConfig, asof: int) -> tuple[PeakLossSurface, int]:
    """Records for t in [asof - window, asof - H], holdings fixed at ``asof``.

    Returns the surface (indices relative to the window start) and the offset.
    """
    lo = asof - cfg.window
    if lo < 0:
        raise DataError(f"need {cfg.window} dates before asof, have {asof}")
    V = cfg.portfolio.value_path(panel, asof)[lo: asof + 1]
    if cfg.constraint is None:
        surf = PeakLossSurface(peak_loss_surface(V, cfg.L, cfg.H))
    else:
        if cfg.constraint.risk_factor not in panel.series:
            raise DataError(f"unknown constraint risk factor {cfg.constraint.risk_factor!r}")
        surf = constrained_peak_loss_surface(V, panel[cfg.constraint.risk_factor][lo: asof + 1],
                                             cfg.L, cfg.H, cfg.constraint)
    return surf, lo


def _rf_rules(cfg: StressConfig) -> dict[str, str]:
    rules = dict(cfg.risk_factors)
    spec = cfg.categories
    if spec.key_factor is not None and spec.key_factor not in rules:
        raise ConfigError(f"key risk factor {spec.key_factor!r} is not among the risk factors")
    return rules


def design_scenario(panel: TimeSeriesPanel, cfg: StressConfig, asof=None, features=None) -> ScenarioDesign:
    """Target losses and expected risk factor shifts at ``asof`` (default: last date)."""
    t_asof = _resolve_asof(panel, asof)
    cfg.portfolio.check(panel)
    rules = _rf_rules(cfg)
    feats = features if features is not None else build_features(panel, cfg.features)
    pos = np.full(len(panel), -1)
    pos[np.searchsorted(panel.dates, feats.dates)] = np.arange(len(feats))
    if pos[t_asof] < 0:
        raise DataError(f"features unavailable at asof {panel.dates[t_asof]}")

    surf, lo = calibration_records(panel, cfg, t_asof)
    if not surf.records:
        raise DataError(f"no stress records: {surf.status}")
    records = [r for r in surf.records if pos[r.t + lo] >= 0][:: max(1, cfg.record_stride)]
    if not records:
        raise DataError("no stress record has features available")
    records = extract_rf_shifts(panel, records, rules, offset=lo)

    spec = cfg.categories.resolve(records) if isinstance(cfg.categories, QuantileGrid) else cfg.categories
    labels = classify_stress(records, spec)
    losses = np.array([r.loss for r in records])
    gaussians = fit_category_gaussians(losses, labels, spec.J)
    fits = {name: fit_bivariate(losses, [r.shifts[name] for r in records], labels, spec.J)
            for name in rules}

    seed = int(np.random.SeedSequence([cfg.seed, t_asof]).generate_state(1)[0])
    x_obs = feats.x[pos[np.array([r.t + lo for r in records])]]
    x_now = feats.x[pos[t_asof]]
    hyper = cfg.vi.hyperparams(x_obs, spec.J, seed)
    state = vi_core.cavi_fit(vi_core.ObservationSet(x_obs, labels), hyper, cfg.vi.options(seed))
    q = vi_core.predictive_cluster_probs(x_now, hyper, state)
    p = vi_core.predictive_category_probs(x_now, hyper, state)

    counts = np.bincount(labels, minlength=spec.J)
    p_eff = redistribute_empty(p, counts)
    mixture = loss_distribution(p_eff, gaussians)
    constraint = cfg.constraint.describe() if cfg.constraint else None
    results = []
    for ps in cfg.p_stars:
        L_star = target_loss(mixture, ps)
        results.append(ScenarioResult(float(ps), L_star, scenario_shifts(p_eff, fits, L_star),
                                      p.tolist(), q.tolist(), constraint))

    flags = sorted({f"category {j}: {f}" for j, g in enumerate(gaussians) for f in g.flags} |
                   {f"category {j} {name}: degenerate bivariate fit"
                    for name, per in fits.items() for j, b in enumerate(per)
                    if b.count > 0 and b.degenerate})
    diagnostics = {
        "n_records": len(records),
        "omitted_dates": [str(panel.dates[t + lo]) for t in surf.omitted],
        "categories": spec.describe(),
        "category_counts": counts.tolist(),
        "effective_category_probs": p_eff.tolist(),
        "loss_gaussians": [{"mean": g.mean, "std": g.std, "count": g.count, "flags": list(g.flags)}
                           for g in gaussians],
        "bivariate": {name: [{"x_mean": b.x_mean, "y_mean": b.y_mean, "sxx": b.sxx, "syy": b.syy,
                              "sxy": b.sxy, "count": b.count} for b in per]
                      for name, per in fits.items()},
        "converged": bool(state.converged),
        "elbo": state.elbo_trace[-1],
        "flags": flags,
    }
    return ScenarioDesign(str(panel.dates[t_asof]), results, diagnostics)


def realized_peak_loss(panel: TimeSeriesPanel, cfg: StressConfig, asof: int) -> float:
    """Loss^asof_{L,H} of the asof holdings, NaN if the horizon runs past the data."""
    if asof + cfg.H >= len(panel):
        return math.nan
    V = cfg.portfolio.value_path(panel, asof)[asof: asof + cfg.H + 1]
    if cfg.constraint is None:
        return peak_loss_surface(V, cfg.L, cfg.H)[0].loss
    key = panel[cfg.constraint.risk_factor][asof: asof + cfg.H + 1]
    surf = constrained_peak_loss_surface(V, key, cfg.L, cfg.H, cfg.constraint)
    return surf.records[0].loss if surf.records else math.nan


@dataclass
class RollingDesign:
    p_stars: tuple[float, ...]
    dates: list[str]
    realized: list[float]
    designs: list[ScenarioDesign]
    failures: list[dict]

    def plot_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", "realized_peak_loss", *(f"target_loss_{p}" for p in self.p_stars)])
        for d, real, des in zip(self.dates, self.realized, self.designs):
            w.writerow([d, repr(real), *(repr(r.target_loss) for r in des.results)])
        return buf.getvalue()


def design_rolling(panel: TimeSeriesPanel, cfg: StressConfig, asofs: Sequence[int], jobs: int = 1) -> RollingDesign:
    feats = build_features(panel, cfg.features)

    def run(t):
        try:
            return design_scenario(panel, cfg, int(t), feats)
        except Exception as exc:  # recorded per date, run continues
            return {"date": str(panel.dates[t]), "error": f"{type(exc).__name__}: {exc}"}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(run, asofs))
    else:
        out = [run(t) for t in asofs]
    designs, dates, realized, failures = [], [], [], []
    for t, res in zip(asofs, out):
        if isinstance(res, ScenarioDesign):
            designs.append(res)
            dates.append(res.asof)
            realized.append(realized_peak_loss(panel, cfg, int(t)))
        else:
            failures.append(res)
    return RollingDesign(tuple(cfg.p_stars), dates, realized, designs, failures)
