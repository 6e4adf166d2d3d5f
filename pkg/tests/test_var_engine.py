import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regime_risk.errors import DataError
from regime_risk.market_data import FeatureSpec, TimeSeriesPanel, build_features, HistRetVector
from regime_risk.oracle_lab import brute_force_weighted_var
from regime_risk.var_engine import (
    BacktestReport, EmpiricalCategoryDist, Normalizer, PnlCategorySpec, VarConfig,
    WeightedPnlDistribution, backtest_dates, bucket_returns, gaussian_var, hs_var,
    label_outcomes, redistribute_empty, var_backtest, var_quantile, weighted_distribution,
)
from regime_risk.vi_core import VIConfig

SPEC = PnlCategorySpec()
outcome_lists = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60)


class TestCategories:
    def test_zscore_counts(self):
        raw = Normalizer(mean=0.0, std=1.0)
        d = bucket_returns(np.array([-1.0, 0.0, 0.5, 1.2]), SPEC, raw)
        np.testing.assert_array_equal(d.counts, [1, 2, 1])

    def test_boundary_goes_up(self):
        raw = Normalizer(0.0, 1.0)
        np.testing.assert_array_equal(bucket_returns(np.array([-0.8, 0.8]), SPEC, raw).labels, [1, 2])

    def test_single_category(self):
        d = bucket_returns(np.full(7, 0.01), SPEC)
        np.testing.assert_array_equal(d.counts, [0, 7, 0])

    def test_own_stats_by_default(self):
        pnl = np.random.default_rng(0).normal(size=100)
        z = (pnl - pnl.mean()) / pnl.std(ddof=1)
        np.testing.assert_array_equal(bucket_returns(pnl, SPEC).labels, SPEC.categorize(z))

    def test_raw_mode(self):
        spec = PnlCategorySpec((-0.01, 0.01), "raw")
        np.testing.assert_array_equal(bucket_returns(np.array([-0.02, 0.0, 0.02]), spec).counts, [1, 1, 1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            bucket_returns(np.array([]), SPEC)

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            PnlCategorySpec((0.8, -0.8))

    def test_label_outcomes(self):
        lab = label_outcomes([-1.5, 0.0, np.nan], SPEC, Normalizer(0.0, 1.0))
        np.testing.assert_array_equal(lab, [0, 1, -1])

    def test_label_outcomes_trailing(self):
        v = np.random.default_rng(1).normal(size=30)
        lab = label_outcomes(v, SPEC, trailing_window=10)
        assert np.all(lab[:9] == -1) and np.all(lab[9:] >= 0)

    @settings(max_examples=100, deadline=None)
    @given(outcome_lists)
    def test_every_value_in_exactly_one_category(self, values):
        d = bucket_returns(np.array(values), SPEC)
        assert d.counts.sum() == len(values)
        assert sum(d.members(j).size for j in range(3)) == len(values)


class TestWeighting:
    def test_direct_division(self):
        dist = EmpiricalCategoryDist(np.arange(10.0), np.array([0, 0] + [1] * 4 + [2] * 4), 3)
        w = weighted_distribution([0.5, 0.25, 0.25], dist)
        np.testing.assert_allclose(w.probabilities, [0.25, 0.25] + [0.0625] * 8, atol=1e-15)

    def test_frequencies_recover_uniform(self):
        labels = np.array([0, 1, 1, 2, 2, 2, 1, 0])
        dist = EmpiricalCategoryDist(np.arange(8.0), labels, 3)
        w = weighted_distribution(dist.counts / 8, dist)
        np.testing.assert_allclose(w.probabilities, 1 / 8, atol=1e-15)

    def test_empty_category_redistribution(self):
        dist = EmpiricalCategoryDist(np.arange(5.0), np.array([0, 0, 2, 2, 2]), 3)
        w = weighted_distribution([0.2, 0.3, 0.5], dist)
        # 0.3 moves pro rata: category 0 gets 0.2/0.7, category 2 gets 0.5/0.7
        np.testing.assert_allclose(w.probabilities, [1 / 7, 1 / 7, 5 / 21, 5 / 21, 5 / 21], atol=1e-15)
        assert w.probabilities.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_mass_on_empty(self):
        np.testing.assert_allclose(redistribute_empty([0.0, 1.0, 0.0], [3, 0, 1]), [0.75, 0.0, 0.25])

    def test_non_simplex_rejected(self):
        dist = EmpiricalCategoryDist(np.arange(3.0), np.array([0, 1, 2]), 3)
        with pytest.raises(ValueError):
            weighted_distribution([0.5, 0.5, 0.5], dist)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 50))
    def test_mass_conservation(self, seed, T):
        rng = np.random.default_rng(seed)
        J = int(rng.integers(2, 6))
        labels = rng.integers(0, J, T)
        p = rng.dirichlet(np.ones(J))
        p[rng.random(J) < 0.3] = 0.0
        p = p / p.sum() if p.sum() > 0 else np.full(J, 1.0 / J)
        w = weighted_distribution(p, EmpiricalCategoryDist(rng.normal(size=T), labels, J))
        assert abs(w.probabilities.sum() - 1.0) < 1e-12
        assert np.all(w.probabilities >= 0)


class TestQuantile:
    def test_direct_accumulation(self):
        w = WeightedPnlDistribution(np.array([-10.0, -5.0, 0.0, 5.0]), np.array([0.05, 0.05, 0.45, 0.45]))
        assert var_quantile(w, 0.95) == 5.0

    @pytest.mark.parametrize("a", [0.01, 0.5, 0.95, 0.999])
    def test_point_mass(self, a):
        assert var_quantile(WeightedPnlDistribution(np.array([-3.0]), np.array([1.0])), a) == 3.0

    def test_thirteenth_worst(self):
        pnl = np.random.default_rng(5).normal(size=250)
        assert hs_var(pnl, 0.95) == np.sort(-pnl)[::-1][12]
        assert hs_var(pnl, 0.95) == brute_force_weighted_var(pnl, np.full(250, 1 / 250), 0.95)

    def test_identical_values(self):
        for a in (0.9, 0.99):
            assert hs_var(np.full(20, 0.7), a) == -0.7

    def test_hs_is_vi_with_frequency_weights(self):
        pnl = np.random.default_rng(6).normal(size=250)
        dist = bucket_returns(pnl, SPEC)
        w = weighted_distribution(dist.counts / 250, dist)
        for a in (0.95, 0.975):
            assert var_quantile(w, a) == hs_var(pnl, a)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.floats(0.01, 0.99))
    def test_matches_brute_force(self, seed, n, a):
        rng = np.random.default_rng(seed)
        o = np.round(rng.normal(size=n), 1)       # rounding forces ties
        p = rng.dirichlet(np.ones(n))
        assert var_quantile(WeightedPnlDistribution(o, p), a) == brute_force_weighted_var(o, p, a)

    @settings(max_examples=100, deadline=None)
    @given(outcome_lists, st.floats(0.01, 0.98), st.floats(0.0, 0.5))
    def test_monotone_in_confidence(self, values, a, gap):
        o = np.array(values)
        w = WeightedPnlDistribution(o, np.full(o.size, 1 / o.size))
        assert var_quantile(w, a) <= var_quantile(w, min(a + gap, 0.999))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=60), st.integers(-500, 500))
    def test_shift_equivariance(self, values, c):
        o = np.array(values, float) / 8      # dyadic values keep the shift exact
        c = c / 8
        for a in (0.9, 0.95, 0.99):
            assert hs_var(o + c, a) == hs_var(o, a) - c
            dist = bucket_returns(o, SPEC)
            w = weighted_distribution(np.array([0.5, 0.3, 0.2]) if dist.counts.all() else dist.counts / o.size,
                                      dist)
            w2 = WeightedPnlDistribution(o + c, w.probabilities)
            assert var_quantile(w2, a) == var_quantile(w, a) - c
            assert gaussian_var(o + c, a) == pytest.approx(gaussian_var(o, a) - c, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_worst_category_mass_raises_var(self, seed, extra):
        rng = np.random.default_rng(seed)
        pnl = rng.normal(size=60)
        dist = bucket_returns(pnl, SPEC)
        if not dist.counts.all():
            return
        p = rng.dirichlet(np.ones(3))
        q = p.copy()
        q[0] += extra
        q /= q.sum()
        for a in (0.9, 0.95, 0.99):
            assert var_quantile(weighted_distribution(q, dist), a) >= var_quantile(weighted_distribution(p, dist), a)


class TestGaussian:
    def test_standard_normal(self):
        z = np.random.default_rng(2).normal(size=500)
        z = (z - z.mean()) / z.std(ddof=1)
        assert gaussian_var(z, 0.95) == pytest.approx(1.6448536269514727149, abs=1e-8)
        assert gaussian_var(z, 0.975) == pytest.approx(1.9599639845400542355, abs=1e-8)

    def test_zero_variance(self):
        assert gaussian_var(np.full(5, 0.3), 0.99) == -0.3

    def test_zero_mean_option(self):
        v = np.array([1.0, 2.0, 3.0])
        assert gaussian_var(v, 0.95, zero_mean=True) == pytest.approx(1.6448536269514727 * 1.0, abs=1e-8)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            gaussian_var(np.array([1.0]), 0.95)


@pytest.fixture(scope="module")
def level_only():
    return (FeatureSpec("vix", "VIX", "level"),)


class TestBacktest:
    def test_date_arithmetic(self, market, balanced, level_only):
        cfg = VarConfig(balanced, level_only, D=1, T=250)
        dates = backtest_dates(market, build_features(market, level_only), cfg)
        # first asof needs T windows behind it: t - D - T >= 0; last needs t + D <= N - 1
        assert dates[0] == 251 and dates[-1] == 598 and len(dates) == 348

    def test_warmup_shifts_start(self, market, balanced, short_features):
        cfg = VarConfig(balanced, short_features, D=1, T=250)
        feats = build_features(market, short_features)
        first = int(np.searchsorted(market.dates, feats.dates[0]))
        assert backtest_dates(market, feats, cfg)[0] == first + 251

    def test_report(self, market, balanced, short_features):
        cfg = VarConfig(balanced, short_features, T=250, stride=40, vi=VIConfig(K=2, restarts=0))
        rep = var_backtest(market, cfg)
        assert len(rep.rows) == 9 and not rep.failures
        for m in BacktestReport.METHODS:
            for a in cfg.confidences:
                np.testing.assert_array_equal(rep.breaches(m, a), -rep.realized() > rep.series(m, a))
        for r in rep.rows:
            assert r.var["vi"][0.975] >= r.var["vi"][0.95]
            assert sum(r.category_probs) == pytest.approx(1.0)
        lines = rep.to_csv().strip().split("\n")
        assert len(lines) == 1 + 9 * 3 * 2
        doc = json.loads(json.dumps(rep.to_dict()))
        assert list(doc["dates"]) == rep.dates()

    def test_deterministic_and_thread_invariant(self, market, balanced, short_features):
        cfg = VarConfig(balanced, short_features, T=250, stride=60, vi=VIConfig(K=2, restarts=1), seed=4)
        a = var_backtest(market, cfg)
        b = var_backtest(market, VarConfig(**{**cfg.__dict__, "jobs": 3}))
        assert a.to_csv() == b.to_csv()

    def test_single_cluster_reduces_to_hs(self, market, balanced, short_features):
        cfg = VarConfig(balanced, short_features, T=250, stride=25,
                        vi=VIConfig(K=1, alpha0=1e-8, restarts=0))
        rep = var_backtest(market, cfg)
        for a in cfg.confidences:
            np.testing.assert_allclose(rep.series("vi", a), rep.series("hs", a), atol=1e-6)

    def test_empty_panel(self, balanced, short_features):
        empty = TimeSeriesPanel(np.array([], dtype="datetime64[D]"), {"SPX": np.array([]), "UST10Y": np.array([])})
        with pytest.raises(DataError):
            var_backtest(empty, VarConfig(balanced, short_features))

    def test_too_short(self, market, balanced, short_features):
        with pytest.raises(DataError):
            var_backtest(market.slice(0, 200), VarConfig(balanced, short_features))

    def test_hist_vector_accepted(self):
        hist = HistRetVector(np.datetime64("2020-01-02"), 1, np.array([0.1, -0.2, 0.3]))
        assert hs_var(hist, 0.5) == -0.1
