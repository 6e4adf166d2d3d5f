import numpy as np
import pytest

from regime_risk.market_data import FeatureSpec, Portfolio, TimeSeriesPanel
from regime_risk.oracle_lab import MarketSpec, business_dates, gen_market_panel


@pytest.fixture(scope="session")
def market():
    panel, regime = gen_market_panel(MarketSpec(seed=3, n_days=600, switch_day=400))
    return panel


@pytest.fixture(scope="session")
def balanced():
    return Portfolio.from_dict({"SPX": {"weight": 0.5}, "UST10Y": {"weight": 0.5, "rule": "bond"}})


@pytest.fixture(scope="session")
def short_features():
    return (FeatureSpec("vix", "VIX", "level"),
            FeatureSpec("spx_vol5", "SPX", "rolling_std", mode="relative", window=5),
            FeatureSpec("ust_chg", "UST10Y", "change"))


def make_panel(**series):
    n = len(next(iter(series.values())))
    return TimeSeriesPanel(business_dates(n), {k: np.asarray(v, float) for k, v in series.items()})


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
