"""Minute-bar panel storage, ingestion, realized-volatility targets, synthetic data.

The panel is the single source of truth for every downstream computation:
a dense (day, symbol, minute, feature) float64 cube plus a validity mask.
Feature order is canonical across the codebase: open, high, low, close,
volume, vwap.  Masked cells carry zeros and a False mask flag, never
sentinel prices; computations that touch a masked cell must mark their
output invalid rather than impute.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataDomainError, FormatError, InsufficientDataError

FEATURES = ("open", "high", "low", "close", "volume", "vwap")
OPEN, HIGH, LOW, CLOSE, VOLUME, VWAP = range(6)

_CSV_HEADER = ("date", "minute", "symbol") + FEATURES


@dataclass(frozen=True)
class MinuteBar:
    """One validated minute bar.  Used row-wise during ingestion."""

    symbol: str
    day: dt.date
    minute_index: int
    open: float
    high: float
    low: float
    close: float
    volume: float
    vwap: float

    def is_valid(self) -> bool:
        """Bar-level invariants: positive prices, OHLC ordering, volume >= 0."""
        prices = (self.open, self.high, self.low, self.close, self.vwap)
        if any(p <= 0.0 for p in prices) or self.volume < 0.0:
            return False
        if self.high < max(self.open, self.close):
            return False
        if self.low > min(self.open, self.close):
            return False
        return self.low <= self.high


@dataclass(frozen=True, eq=False)
class Panel:
    """Dense minute-bar cube.

    values has shape (n_days, n_symbols, minutes_per_day, 6) with the
    canonical feature order; mask has shape (n_days, n_symbols,
    minutes_per_day) and is True exactly where the cell holds real data.
    Immutable after construction and safe to share across readers.
    """

    days: tuple[dt.date, ...]
    symbols: tuple[str, ...]
    minutes_per_day: int
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        expected = (len(self.days), len(self.symbols), self.minutes_per_day, len(FEATURES))
        if self.values.shape != expected:
            raise FormatError(f"panel values shape {self.values.shape} != {expected}")
        if self.mask.shape != expected[:3]:
            raise FormatError(f"panel mask shape {self.mask.shape} != {expected[:3]}")
        self.values.setflags(write=False)
        self.mask.setflags(write=False)

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)

    def day_index(self, day: dt.date) -> int:
        try:
            return self.days.index(day)
        except ValueError:
            raise FormatError(f"day {day.isoformat()} not in panel") from None

    def slice_days(self, start: dt.date, end: dt.date) -> "Panel":
        """Copy of the panel restricted to days in [start, end]."""
        keep = [i for i, d in enumerate(self.days) if start <= d <= end]
        if not keep:
            raise InsufficientDataError(
                f"no panel days in range {start.isoformat()}..{end.isoformat()}"
            )
        idx = np.asarray(keep)
        return Panel(
            days=tuple(self.days[i] for i in keep),
            symbols=self.symbols,
            minutes_per_day=self.minutes_per_day,
            values=self.values[idx].copy(),
            mask=self.mask[idx].copy(),
        )


@dataclass(frozen=True, eq=False)
class RvTarget:
    """Per-(day, symbol) prediction target with a validity mask.

    Row d holds the realized volatility of day d+1; the last panel day
    therefore has no target and is always masked.
    """

    days: tuple[dt.date, ...]
    symbols: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        expected = (len(self.days), len(self.symbols))
        if self.values.shape != expected or self.mask.shape != expected:
            raise FormatError(f"target shape mismatch: {self.values.shape} vs {expected}")
        if np.any(self.values[self.mask] < 0.0):
            raise DataDomainError("target values must be nonnegative on valid cells")
        self.values.setflags(write=False)
        self.mask.setflags(write=False)

    def slice_days(self, start: dt.date, end: dt.date) -> "RvTarget":
        keep = [i for i, d in enumerate(self.days) if start <= d <= end]
        if not keep:
            raise InsufficientDataError(
                f"no target days in range {start.isoformat()}..{end.isoformat()}"
            )
        idx = np.asarray(keep)
        return RvTarget(
            days=tuple(self.days[i] for i in keep),
            symbols=self.symbols,
            values=self.values[idx].copy(),
            mask=self.mask[idx].copy(),
        )


@dataclass(frozen=True)
class DateRange:
    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.start > self.end:
            raise FormatError(f"date range start {self.start} after end {self.end}")


@dataclass(frozen=True)
class SplitSpec:
    """Chronological pretrain / train / eval windows.

    pretrain and train must be disjoint with pretrain first; eval either
    equals train or follows it.
    """

    pretrain: DateRange | None
    train: DateRange
    eval: DateRange

    def __post_init__(self):
        if self.pretrain is not None and self.pretrain.end >= self.train.start:
            raise FormatError("pretrain range must end before train range starts")
        if self.eval != self.train and self.eval.start <= self.train.end:
            raise FormatError("eval range must equal the train range or follow it")


@dataclass
class IngestDiagnostics:
    """Summary returned alongside an ingested panel."""

    rows_total: int = 0
    rows_invalid: int = 0
    cells_missing: int = 0
    invalid_examples: list[str] = field(default_factory=list)


def _parse_number(text: str, row_num: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"row {row_num}: unparseable number {text!r} in column {column!r}") from None
    if not np.isfinite(value):
        raise FormatError(f"row {row_num}: non-finite number in column {column!r}")
    return value


def ingest_csv(path: str | Path, market_minutes: int) -> tuple[Panel, IngestDiagnostics]:
    """Read a minute-bar CSV into a dense panel.

    The file must carry the header (date, minute, symbol, open, high, low,
    close, volume, vwap).  Rows that violate bar-level invariants are
    masked and counted in the diagnostics; structural problems (missing
    column, minute out of range, unparseable number, duplicate cell) raise
    FormatError.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    if market_minutes < 1:
        raise FormatError(f"market_minutes must be >= 1, got {market_minutes}")

    rows: dict[tuple[dt.date, str, int], tuple[float, ...] | None] = {}
    diag = IngestDiagnostics()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        missing = [c for c in _CSV_HEADER if c not in header]
        if missing:
            raise FormatError(f"{path}: missing header column {missing[0]!r}")
        extra = [c for c in header if c not in _CSV_HEADER]
        if extra:
            raise FormatError(f"{path}: unknown header column {extra[0]!r}")
        col = {name: header.index(name) for name in _CSV_HEADER}

        for row_num, raw in enumerate(reader, start=2):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            if len(raw) != len(header):
                raise FormatError(f"row {row_num}: expected {len(header)} fields, got {len(raw)}")
            diag.rows_total += 1
            try:
                day = dt.date.fromisoformat(raw[col["date"]].strip())
            except ValueError:
                raise FormatError(f"row {row_num}: bad date {raw[col['date']]!r}") from None
            try:
                minute = int(raw[col["minute"]])
            except ValueError:
                raise FormatError(f"row {row_num}: bad minute index {raw[col['minute']]!r}") from None
            if not 0 <= minute < market_minutes:
                raise FormatError(
                    f"row {row_num}: minute {minute} outside [0, {market_minutes})"
                )
            symbol = raw[col["symbol"]].strip()
            if not symbol:
                raise FormatError(f"row {row_num}: empty symbol")
            numbers = tuple(_parse_number(raw[col[f]], row_num, f) for f in FEATURES)
            key = (day, symbol, minute)
            if key in rows:
                raise FormatError(f"row {row_num}: duplicate cell {key}")
            bar = MinuteBar(symbol, day, minute, *numbers)
            if bar.is_valid():
                rows[key] = numbers
            else:
                rows[key] = None
                diag.rows_invalid += 1
                if len(diag.invalid_examples) < 5:
                    diag.invalid_examples.append(f"row {row_num}: {day} {symbol} m{minute}")

    if not rows:
        raise FormatError(f"{path}: no data rows")

    days = tuple(sorted({k[0] for k in rows}))
    symbols = tuple(sorted({k[1] for k in rows}))
    day_pos = {d: i for i, d in enumerate(days)}
    sym_pos = {s: i for i, s in enumerate(symbols)}

    values = np.zeros((len(days), len(symbols), market_minutes, len(FEATURES)))
    mask = np.zeros((len(days), len(symbols), market_minutes), dtype=bool)
    for (day, symbol, minute), numbers in rows.items():
        if numbers is None:
            continue
        values[day_pos[day], sym_pos[symbol], minute] = numbers
        mask[day_pos[day], sym_pos[symbol], minute] = True

    diag.cells_missing = int(mask.size - mask.sum()) - diag.rows_invalid
    return Panel(days, symbols, market_minutes, values, mask), diag


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Serialize a panel back to the ingestion format.

    Masked cells are omitted.  Numbers are written with repr so a clean
    ingest -> write -> ingest cycle round-trips every cell bit-exactly.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for di, day in enumerate(panel.days):
            for si, sym in enumerate(panel.symbols):
                for mi in range(panel.minutes_per_day):
                    if not panel.mask[di, si, mi]:
                        continue
                    cell = panel.values[di, si, mi]
                    writer.writerow(
                        [day.isoformat(), mi, sym] + [repr(float(x)) for x in cell]
                    )


def compute_rv(panel: Panel) -> RvTarget:
    """Next-day realized volatility: sum of squared intraday log returns.

    The target for (day d, symbol s) is computed exclusively from day
    d+1 closing prices; the last day is masked.  Log returns use the
    ratio form ln(c_j / c_{j-1}) so a global price rescaling cancels
    inside the division.
    """
    if panel.n_days < 2:
        raise InsufficientDataError("realized-volatility target needs at least 2 days")

    closes = panel.values[..., CLOSE]
    bad = (closes <= 0.0) & panel.mask
    if bad.any():
        d, s, m = map(int, np.argwhere(bad)[0])
        raise DataDomainError(
            f"nonpositive close at day {panel.days[d].isoformat()} "
            f"symbol {panel.symbols[s]} minute {m}"
        )

    values = np.zeros((panel.n_days, panel.n_symbols))
    mask = np.zeros((panel.n_days, panel.n_symbols), dtype=bool)
    # target row d <- day d+1 intraday closes; a single masked minute
    # invalidates the whole (day, symbol) target.
    full_day = panel.mask.all(axis=2)
    for d in range(panel.n_days - 1):
        ok = full_day[d + 1]
        if not ok.any():
            continue
        c = closes[d + 1, ok, :]
        if panel.minutes_per_day >= 2:
            r = np.log(c[:, 1:] / c[:, :-1])
            values[d, ok] = np.sum(r * r, axis=1)
        mask[d, ok] = True
    return RvTarget(panel.days, panel.symbols, values, mask)


def write_rv_csv(target: RvTarget, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "symbol", "rv", "valid"])
        for di, day in enumerate(target.days):
            for si, sym in enumerate(target.symbols):
                writer.writerow(
                    [
                        day.isoformat(),
                        sym,
                        repr(float(target.values[di, si])),
                        int(target.mask[di, si]),
                    ]
                )


def read_rv_csv(path: str | Path) -> RvTarget:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    cells: dict[tuple[dt.date, str], tuple[float, bool]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "symbol", "rv", "valid"]:
            raise FormatError(f"{path}: expected header date,symbol,rv,valid")
        for row_num, raw in enumerate(reader, start=2):
            if not raw:
                continue
            try:
                day = dt.date.fromisoformat(raw[0])
                rv = float(raw[2])
                valid = bool(int(raw[3]))
            except (ValueError, IndexError):
                raise FormatError(f"row {row_num}: malformed target row") from None
            cells[(day, raw[1])] = (rv, valid)
    if not cells:
        raise FormatError(f"{path}: no target rows")
    days = tuple(sorted({k[0] for k in cells}))
    symbols = tuple(sorted({k[1] for k in cells}))
    values = np.zeros((len(days), len(symbols)))
    mask = np.zeros((len(days), len(symbols)), dtype=bool)
    for di, day in enumerate(days):
        for si, sym in enumerate(symbols):
            rv, valid = cells.get((day, sym), (0.0, False))
            values[di, si] = rv if valid else 0.0
            mask[di, si] = valid
    return RvTarget(days, symbols, values, mask)


def align_target(target: RvTarget, panel: Panel) -> RvTarget:
    """Reindex a target to a panel's days and symbols; missing cells are masked."""
    day_pos = {d: i for i, d in enumerate(target.days)}
    sym_pos = {s: i for i, s in enumerate(target.symbols)}
    values = np.zeros((panel.n_days, panel.n_symbols))
    mask = np.zeros((panel.n_days, panel.n_symbols), dtype=bool)
    for di, day in enumerate(panel.days):
        ti = day_pos.get(day)
        if ti is None:
            continue
        for si, sym in enumerate(panel.symbols):
            tj = sym_pos.get(sym)
            if tj is None:
                continue
            values[di, si] = target.values[ti, tj]
            mask[di, si] = target.mask[ti, tj]
    return RvTarget(panel.days, panel.symbols, values, mask)


def generate_synthetic(
    n_symbols: int,
    n_days: int,
    minutes: int,
    seed: int,
    planted_formula,
    catalog,
    noise_sd: float = 0.0,
    start_day: dt.date = dt.date(2024, 1, 2),
) -> tuple[Panel, RvTarget]:
    """Deterministic synthetic panel with a plantable factor relation.

    Prices follow a positive geometric random walk that respects all bar
    invariants.  The target is overwritten with a per-day positive affine
    transform of the planted formula's daily values plus Gaussian noise,
    so at noise_sd = 0 the planted formula has daily Pearson correlation
    1 with the target.  Volume is drawn at the same cross-sectional scale
    as prices so that differently weighted feature mixes remain
    cross-sectionally distinguishable.

    The RNG consumption order is fixed (prices, spreads, vwap, volume,
    noise), so panels are identical across noise levels and planted
    formulas for a given (shape, seed).
    """
    if noise_sd < 0.0:
        raise DataDomainError(f"noise_sd must be nonnegative, got {noise_sd}")
    if n_symbols < 1 or n_days < 2 or minutes < 1:
        raise FormatError("synthetic spec needs n_symbols >= 1, n_days >= 2, minutes >= 1")

    rng = np.random.default_rng(seed)
    shape = (n_days, n_symbols, minutes)

    p0 = rng.uniform(50.0, 150.0, (n_days, n_symbols))
    steps = rng.normal(0.0, 0.002, shape)
    closes = p0[..., None] * np.exp(np.cumsum(steps, axis=2))
    opens = np.concatenate([p0[..., None], closes[..., :-1]], axis=2)
    # intraday range scale is heterogeneous per (day, symbol) so that
    # range-based quantities vary cross-sectionally at the same order of
    # magnitude as price levels
    range_scale = rng.uniform(0.05, 1.0, (n_days, n_symbols))[..., None]
    hi_frac = range_scale * rng.uniform(0.3, 0.7, shape)
    lo_frac = range_scale * rng.uniform(0.3, 0.7, shape)
    highs = np.maximum(opens, closes) * (1.0 + hi_frac)
    lows = np.minimum(opens, closes) * (1.0 - lo_frac)
    vwaps = lows + rng.uniform(0.0, 1.0, shape) * (highs - lows)
    v0 = rng.uniform(50.0, 150.0, (n_days, n_symbols))
    volumes = v0[..., None] * rng.uniform(0.5, 1.5, shape)

    values = np.stack([opens, highs, lows, closes, volumes, vwaps], axis=-1)
    days = tuple(start_day + dt.timedelta(days=i) for i in range(n_days))
    symbols = tuple(f"SYM{i:03d}" for i in range(n_symbols))
    panel = Panel(days, symbols, minutes, values, np.ones(shape, dtype=bool))

    from .expr import evaluate  # deferred: expr depends on Panel

    factor = evaluate(planted_formula, catalog, panel)
    noise = rng.normal(0.0, 1.0, (n_days, n_symbols))

    tvalues = np.zeros((n_days, n_symbols))
    tmask = np.zeros((n_days, n_symbols), dtype=bool)
    for d in range(n_days - 1):
        ok = factor.mask[d]
        if ok.sum() < 2:
            continue
        f = factor.values[d, ok]
        sd = f.std()
        if sd < 1e-12:
            continue  # cross-sectionally flat day: no usable target
        z = (f - f.mean()) / sd
        base = z - z.min() + 1.0
        tvalues[d, ok] = np.maximum(base + noise_sd * noise[d, ok], 0.0)
        tmask[d, ok] = True
    return panel, RvTarget(days, symbols, tvalues, tmask)
