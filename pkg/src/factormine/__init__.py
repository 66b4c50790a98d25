"""factormine: mining concise intraday risk factors from minute-bar panels.

A two-level policy-gradient search composes closed-form factor
expressions from weighted raw features, scores them by daily
cross-sectional correlation with next-day realized volatility, and
validates the best pool in a portfolio backtest.
"""

from .backtest import PortfolioConfig, portfolio_weights, run_backtest
from .data import Panel, RvTarget, compute_rv, generate_synthetic, ingest_csv
from .expr import (
    FactorExpr,
    OptionCatalog,
    default_catalog,
    evaluate,
    legal_next_tokens,
    parse,
    serialize,
)
from .metrics import FactorPool, ic_series, pearson, reward, spearman
from .trainer import TrainConfig, Trainer, pretrain_then_transfer

__version__ = "0.1.0"

__all__ = [
    "FactorExpr",
    "FactorPool",
    "OptionCatalog",
    "Panel",
    "PortfolioConfig",
    "RvTarget",
    "TrainConfig",
    "Trainer",
    "__version__",
    "compute_rv",
    "default_catalog",
    "evaluate",
    "generate_synthetic",
    "ic_series",
    "ingest_csv",
    "legal_next_tokens",
    "parse",
    "pearson",
    "portfolio_weights",
    "pretrain_then_transfer",
    "reward",
    "run_backtest",
    "serialize",
    "spearman",
]
