"""Daily-rebalanced risk-averse portfolio simulation.

Each day the tradable symbols are ranked by that day's factor value,
the configured number selected (lowest predicted risk by default), and
weighted inversely to their factor value.  Positions execute at the
day's final close and the holding return realizes over the next day's
final close, so the simulation never looks ahead.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CLOSE, Panel
from .errors import BacktestError, ConfigError, DataDomainError
from .expr import FactorExpr, OptionCatalog, evaluate

SELECTIONS = ("lowest_factor", "highest_factor")


@dataclass(frozen=True)
class PortfolioConfig:
    top_n: int = 30
    selection: str = "lowest_factor"
    cost_bps: float = 0.0

    def __post_init__(self):
        if self.top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {self.top_n}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.cost_bps < 0.0:
            raise ConfigError(f"cost_bps must be >= 0, got {self.cost_bps}")


@dataclass(frozen=True, eq=False)
class BacktestResult:
    """Net-value path and summary statistics.

    net_value[0] = 1.0 and net_value[t] = net_value[t-1] * (1 +
    daily_returns[t] - cost); daily_returns[t] and turnover[t] belong to
    the rebalance decided at day t-1's close.
    """

    days: tuple[dt.date, ...]
    net_value: np.ndarray
    daily_returns: np.ndarray
    turnover: np.ndarray
    total_return: float
    max_drawdown: float
    volatility: float
    short_days: int  # days that had fewer valid symbols than top_n


def portfolio_weights(factor_values: np.ndarray) -> np.ndarray:
    """Inverse-value weights: w_i = (1/v_i) / sum_j (1/v_j).

    Requires strictly positive inputs; weights are positive, sum to 1,
    and decrease in the factor value.
    """
    v = np.asarray(factor_values, dtype=float)
    if v.size == 0:
        raise DataDomainError("cannot weight an empty selection")
    if np.any(v <= 0.0):
        raise DataDomainError("inverse weighting needs strictly positive factor values")
    inv = 1.0 / v
    return inv / inv.sum()


def _shift_positive(values: np.ndarray) -> np.ndarray:
    """Order-preserving shift making every value strictly positive."""
    lo = values.min()
    if lo > 0.0:
        return values
    span = values.max() - lo
    delta = 1e-6 * span if span > 0.0 else 1e-6 * max(1.0, abs(lo))
    return values - lo + delta


def run_backtest(
    expr: FactorExpr,
    catalog: OptionCatalog,
    panel: Panel,
    config: PortfolioConfig | None = None,
    aggregation: str = "mean",
) -> BacktestResult:
    """Simulate the daily portfolio for one factor over the panel's days."""
    config = config or PortfolioConfig()
    if panel.n_days < 2:
        raise BacktestError("backtest needs at least 2 days")

    factor = evaluate(expr, catalog, panel, aggregation)
    closes = panel.values[:, :, -1, CLOSE]
    close_ok = panel.mask[:, :, -1]

    n = panel.n_days
    net_value = np.ones(n)
    daily_returns = np.zeros(n)
    turnover = np.zeros(n)
    prev_weights: dict[int, float] = {}
    short_days = 0

    for d in range(n - 1):
        tradable = factor.mask[d] & close_ok[d] & close_ok[d + 1]
        idx = np.flatnonzero(tradable)
        if idx.size == 0:
            raise BacktestError(f"no valid symbols on {panel.days[d].isoformat()}")
        if idx.size < config.top_n:
            short_days += 1
        values = factor.values[d, idx]
        order = np.argsort(values, kind="stable")
        if config.selection == "highest_factor":
            order = order[::-1]
        picked = idx[order[: config.top_n]]

        weights = portfolio_weights(_shift_positive(factor.values[d, picked]))
        new_weights = {int(s): float(w) for s, w in zip(picked, weights)}

        symbols = set(prev_weights) | set(new_weights)
        turn = sum(abs(new_weights.get(s, 0.0) - prev_weights.get(s, 0.0)) for s in symbols)
        ret = float(
            np.sum(weights * (closes[d + 1, picked] / closes[d, picked] - 1.0))
        )
        cost = config.cost_bps * 1e-4 * turn

        daily_returns[d + 1] = ret
        turnover[d + 1] = turn
        net_value[d + 1] = net_value[d] * (1.0 + ret - cost)
        prev_weights = new_weights

    peaks = np.maximum.accumulate(net_value)
    drawdowns = 1.0 - net_value / peaks
    return BacktestResult(
        days=panel.days,
        net_value=net_value,
        daily_returns=daily_returns,
        turnover=turnover,
        total_return=float(net_value[-1] - 1.0),
        max_drawdown=float(drawdowns.max()),
        volatility=float(daily_returns[1:].std()),
        short_days=short_days,
    )


def write_result_csv(result: BacktestResult, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("date,net_value,daily_return,turnover\n")
        for i, day in enumerate(result.days):
            fh.write(
                f"{day.isoformat()},{float(result.net_value[i])!r},"
                f"{float(result.daily_returns[i])!r},{float(result.turnover[i])!r}\n"
            )


def summary_text(result: BacktestResult) -> str:
    return (
        "{\n"
        f'  "total_return": {result.total_return!r},\n'
        f'  "max_drawdown": {result.max_drawdown!r},\n'
        f'  "volatility": {result.volatility!r},\n'
        f'  "short_days": {result.short_days}\n'
        "}\n"
    )


def plot_net_value(result: BacktestResult, path: str | Path, label: str = "factor") -> None:
    """Optional static plot of the cumulative net-value curve."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("plotting requires matplotlib (install the 'plot' extra)") from exc
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot([d.isoformat() for d in result.days], result.net_value, label=label)
    ax.set_xlabel("date")
    ax.set_ylabel("net value")
    ax.legend()
    ax.tick_params(axis="x", rotation=60, labelsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
