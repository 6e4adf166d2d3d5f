"""Regime-conditional VaR and stress scenario design via mean-field variational inference."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, RegimeRiskError  # noqa: E402

__all__ = ["ConfigError", "DataError", "NumericalError", "RegimeRiskError", "__version__"]
