"""Daily cross-sectional correlation metrics, the scalar reward, and the factor pool.

The per-day statistics are the Pearson correlation between factor values
and the next-day realized-volatility target, its Spearman (rank) analogue,
and the information ratio (mean of the daily series over its standard
deviation).  Aggregates use the population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RvTarget
from .errors import (
    DegenerateCorrelationError,
    FormatError,
    InsufficientDataError,
    UsageError,
)
from .expr import FactorExpr, FactorValues, OptionCatalog, parse, serialize

DEGENERATE_STD = 1e-12
# a vector is treated as constant when its span is this small relative to
# its magnitude; an absolute variance test would let rounding noise on a
# constant vector of large values masquerade as signal
DEGENERATE_REL_SPAN = 1e-12


def _is_constant(x: np.ndarray) -> bool:
    span = x.max() - x.min()
    scale = max(abs(float(x.max())), abs(float(x.min())))
    return not span > DEGENERATE_REL_SPAN * scale


def pearson(x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Product-moment correlation over the jointly valid entries.

    Raises InsufficientDataError with fewer than 2 valid points and
    DegenerateCorrelationError when either side is constant; a constant
    input never silently maps to 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InsufficientDataError(f"shape mismatch {x.shape} vs {y.shape}")
    if mask is not None:
        x = x[mask]
        y = y[mask]
    if x.size < 2:
        raise InsufficientDataError(f"need >= 2 valid points, got {x.size}")
    if _is_constant(x) or _is_constant(y):
        raise DegenerateCorrelationError("correlation of a constant vector is undefined")
    with np.errstate(all="ignore"):
        xd = x - x.mean()
        yd = y - y.mean()
        vx = np.mean(xd * xd)
        vy = np.mean(yd * yd)
        # single sqrt of the variance product keeps self-correlation exactly 1
        r = np.mean(xd * yd) / np.sqrt(vx * vy)
    if not np.isfinite(r):
        raise DegenerateCorrelationError("correlation numerically undefined")
    return float(np.clip(r, -1.0, 1.0))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(x, kind="stable")
    sx = x[order]
    group_start = np.empty(x.size, dtype=bool)
    group_start[0] = True
    group_start[1:] = sx[1:] != sx[:-1]
    gid = np.cumsum(group_start) - 1
    counts = np.bincount(gid)
    ends = np.cumsum(counts).astype(float)
    avg = ends - (counts - 1) / 2.0  # mean of ranks end-count+1 .. end
    ranks = np.empty(x.size)
    ranks[order] = avg[gid]
    return ranks


def spearman(x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Pearson correlation of average-tie ranks on the jointly valid subset."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InsufficientDataError(f"shape mismatch {x.shape} vs {y.shape}")
    if mask is not None:
        x = x[mask]
        y = y[mask]
    if x.size < 2:
        raise InsufficientDataError(f"need >= 2 valid points, got {x.size}")
    return pearson(_average_ranks(x), _average_ranks(y))


def daily_pearson(
    fvalues: np.ndarray,
    fmask: np.ndarray,
    tvalues: np.ndarray,
    tmask: np.ndarray,
) -> np.ndarray:
    """Vectorized per-day cross-sectional Pearson correlations.

    Returns a (days,) array with NaN on days that have fewer than 2
    jointly valid symbols or a constant side.
    """
    joint = fmask & tmask
    n = joint.sum(axis=1).astype(float)
    x = np.where(joint, fvalues, 0.0)
    y = np.where(joint, tvalues, 0.0)

    def row_spread_ok(values):
        hi = np.where(joint, values, -np.inf).max(axis=1)
        lo = np.where(joint, values, np.inf).min(axis=1)
        scale = np.maximum(np.abs(hi), np.abs(lo))
        with np.errstate(invalid="ignore"):
            return (hi - lo) > DEGENERATE_REL_SPAN * scale

    with np.errstate(all="ignore"):
        denom = np.maximum(n, 1.0)
        mx = x.sum(axis=1) / denom
        my = y.sum(axis=1) / denom
        dx = np.where(joint, fvalues - mx[:, None], 0.0)
        dy = np.where(joint, tvalues - my[:, None], 0.0)
        vx = (dx * dx).sum(axis=1) / denom
        vy = (dy * dy).sum(axis=1) / denom
        r = ((dx * dy).sum(axis=1) / denom) / np.sqrt(vx * vy)
        ok = (n >= 2) & row_spread_ok(fvalues) & row_spread_ok(tvalues) & np.isfinite(r)
    return np.where(ok, np.clip(r, -1.0, 1.0), np.nan)


@dataclass(frozen=True, eq=False)
class IcSeries:
    """Daily correlation series and their aggregates.

    daily_ic / daily_rank_ic are aligned to the target's days and hold
    NaN on skipped days (too few valid symbols or a constant side).
    ir_star is None when fewer than 2 computable days exist or the daily
    series has zero standard deviation.
    """

    daily_ic: np.ndarray
    daily_rank_ic: np.ndarray
    ic_star: float
    rank_ic_star: float
    ir_star: float | None
    ic_std: float
    rank_ic_std: float
    n_days: int
    n_skipped: int


def ic_series(values: FactorValues, target: RvTarget) -> IcSeries:
    """Per-day cross-sectional correlations over jointly valid symbols.

    Days failing the correlation preconditions are skipped and counted;
    with zero computable days the series is undefined.
    """
    if values.values.shape != target.values.shape:
        raise InsufficientDataError(
            f"factor shape {values.values.shape} != target shape {target.values.shape}"
        )
    n_days = values.values.shape[0]
    daily_ic = daily_pearson(values.values, values.mask, target.values, target.mask)
    daily_rank = np.full(n_days, np.nan)
    skipped = 0
    for d in range(n_days):
        if np.isnan(daily_ic[d]):
            skipped += 1
            continue
        joint = values.mask[d] & target.mask[d]
        daily_rank[d] = pearson(
            _average_ranks(values.values[d][joint]),
            _average_ranks(target.values[d][joint]),
        )
    ok = ~np.isnan(daily_ic)
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise InsufficientDataError("no day admits a cross-sectional correlation")
    ic = daily_ic[ok]
    rank = daily_rank[ok]
    ic_std = float(ic.std())
    ir = float(ic.mean() / ic_std) if n_ok >= 2 and ic_std >= DEGENERATE_STD else None
    return IcSeries(
        daily_ic=daily_ic,
        daily_rank_ic=daily_rank,
        ic_star=float(ic.mean()),
        rank_ic_star=float(rank.mean()),
        ir_star=ir,
        ic_std=ic_std,
        rank_ic_std=float(rank.std()),
        n_days=n_ok,
        n_skipped=skipped,
    )


def reward(
    values: FactorValues,
    target: RvTarget,
    mask_threshold: float = 0.5,
    rank_weight: float = 0.0,
    ir_weight: float = 0.0,
) -> float:
    """Scalar training reward in [0, ...): |mean daily IC| by default.

    Never raises: degenerate factors (constant, mostly masked, no
    computable day) score 0 so sampling arbitrary expressions stays safe.
    rank_weight / ir_weight mix in |rank IC*| and |IR*| when nonzero.
    """
    if values.mask.size == 0 or np.mean(values.mask) < 1.0 - mask_threshold:
        return 0.0
    try:
        series = ic_series(values, target)
    except InsufficientDataError:
        return 0.0
    score = abs(series.ic_star)
    if rank_weight != 0.0:
        score += rank_weight * abs(series.rank_ic_star)
    if ir_weight != 0.0 and series.ir_star is not None:
        score += ir_weight * abs(series.ir_star)
    return float(score)


# ---------------------------------------------------------------------------
# Factor pool
# ---------------------------------------------------------------------------


@dataclass
class PoolEntry:
    expr: FactorExpr
    series: IcSeries
    score: float
    values: FactorValues


@dataclass
class FactorPool:
    """Capacity-bounded, correlation-deduplicated collection of mined factors.

    Admission keeps the better of any correlated pair: a candidate that
    beats every correlated incumbent displaces them, which makes the best
    pool score monotone in capacity on a fixed candidate stream.  Entries
    stay sorted by admission score, descending.
    """

    capacity: int
    correlation_cap: float = 0.7
    entries: list[PoolEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise FormatError(f"pool capacity must be >= 1, got {self.capacity}")
        if not 0.0 < self.correlation_cap <= 1.0:
            raise FormatError(f"correlation cap must lie in (0, 1], got {self.correlation_cap}")

    @property
    def best_score(self) -> float:
        return self.entries[0].score if self.entries else 0.0

    def _pairwise_correlation(self, a: FactorValues, b: FactorValues) -> float:
        joint = a.mask & b.mask
        try:
            return abs(pearson(a.values, b.values, joint))
        except (InsufficientDataError, DegenerateCorrelationError):
            return 0.0

    def admit(
        self,
        expr: FactorExpr,
        values: FactorValues,
        series: IcSeries | None = None,
        series_factory=None,
        score: float | None = None,
    ) -> bool:
        """Try to add a candidate; returns True if it entered the pool.

        The full correlation series is only needed for stored entries, so
        callers that batch many candidates can pass score plus a
        series_factory instead of a precomputed series.
        """
        if score is None:
            if series is None:
                raise UsageError("admit needs either a series or an explicit score")
            score = abs(series.ic_star)
        correlated = [
            e for e in self.entries
            if self._pairwise_correlation(values, e.values) > self.correlation_cap
        ]
        if any(e.score >= score for e in correlated):
            return False
        for e in correlated:
            self.entries.remove(e)
        if len(self.entries) >= self.capacity:
            if score <= self.entries[-1].score:
                return False
            self.entries.pop()
        if series is None:
            series = series_factory()
        self.entries.append(PoolEntry(expr, series, score, values))
        self.entries.sort(key=lambda e: -e.score)
        return True


def write_pool(pool: FactorPool, catalog: OptionCatalog, path: str | Path) -> None:
    """Line-oriented pool file: formula, option index, score; tab-separated."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in pool.entries:
            fh.write(
                f"{serialize(entry.expr, catalog)}\t{entry.expr.option_id}\t{entry.score!r}\n"
            )


def read_pool_file(
    path: str | Path, catalog: OptionCatalog, max_length: int = 15, include_pow: bool = False
) -> list[tuple[FactorExpr, float]]:
    """Parse a pool file back into expressions with their stored scores."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    out: list[tuple[FactorExpr, float]] = []
    for line_num, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{line_num}: expected 3 tab-separated fields")
        try:
            option_id = int(parts[1])
            score = float(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{line_num}: bad option index or score") from None
        expr = parse(
            parts[0], catalog, max_length=max_length,
            include_pow=include_pow, option_id=option_id,
        )
        out.append((expr, score))
    if not out:
        raise FormatError(f"{path}: empty factor pool")
    return out
