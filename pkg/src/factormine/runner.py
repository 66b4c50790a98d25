"""Job layer shared by the CLI and the HTTP service.

Each run_* function is a pure function of (config file, input files,
seed): identical inputs produce byte-identical output files.  Output
paths are refused when they already exist, unless force is set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import backtest as bt
from . import data as md
from .config import RunConfig, load_run_config
from .data import DateRange, Panel, RvTarget, SplitSpec
from .errors import ConfigError, UsageError
from .expr import FactorExpr, OptionCatalog, default_catalog, evaluate, parse, serialize
from .metrics import ic_series, read_pool_file, write_pool
from .trainer import Trainer, pretrain_then_transfer

logger = logging.getLogger(__name__)


def _refuse_existing(paths: list[Path], force: bool) -> None:
    for p in paths:
        if p.exists() and not force:
            raise UsageError(f"output {p} exists; pass --force to overwrite")


def _load_panel_and_target(cfg: RunConfig) -> tuple[Panel, RvTarget]:
    panel, diag = md.ingest_csv(cfg.require_data_path(), cfg.data.market_minutes)
    if diag.rows_invalid:
        logger.warning("masked %d invalid rows during ingestion", diag.rows_invalid)
    if cfg.data.target_path is not None:
        target = md.align_target(md.read_rv_csv(cfg.data.target_path), panel)
    else:
        target = md.compute_rv(panel)
    return panel, target


def _window(
    panel: Panel, target: RvTarget, date_range: DateRange | None
) -> tuple[Panel, RvTarget]:
    if date_range is None:
        return panel, target
    return (
        panel.slice_days(date_range.start, date_range.end),
        target.slice_days(date_range.start, date_range.end),
    )


def _eval_range(cfg: RunConfig) -> DateRange | None:
    return cfg.data.eval or cfg.data.train


@dataclass
class SynthResult:
    panel_path: Path
    target_path: Path
    formula: str
    option_id: int
    measured_ic: float


def run_synth(config_path: str | Path, out_dir: str | Path, force: bool = False,
              seed: int | None = None, threads: int | None = None) -> SynthResult:
    cfg = load_run_config(config_path, seed, threads)
    spec = cfg.require_synthetic()
    catalog = default_catalog()
    planted = parse(
        spec.formula, catalog,
        max_length=cfg.train.max_length, include_pow=cfg.train.include_pow,
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel_path = out / "panel.csv"
    target_path = out / "target.csv"
    _refuse_existing([panel_path, target_path], force)

    panel, target = md.generate_synthetic(
        spec.symbols, spec.days, spec.minutes, cfg.seed,
        planted, catalog, noise_sd=spec.noise_sd,
    )
    md.write_panel_csv(panel, panel_path)
    md.write_rv_csv(target, target_path)

    values = evaluate(planted, catalog, panel, cfg.train.aggregation)
    measured = ic_series(values, target).ic_star
    return SynthResult(panel_path, target_path, spec.formula, planted.option_id, measured)


@dataclass
class MineResult:
    checkpoint_path: Path
    pool_path: Path
    log_path: Path
    iterations_run: int
    pool_best: float
    pool_size: int


def run_mine(config_path: str | Path, out_dir: str | Path, force: bool = False,
             seed: int | None = None, threads: int | None = None) -> MineResult:
    cfg = load_run_config(config_path, seed, threads)
    catalog = default_catalog()
    panel, target = _load_panel_and_target(cfg)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out / "checkpoint.bin"
    pool_path = out / "pool.tsv"
    log_path = out / "train_log.csv"
    _refuse_existing([checkpoint_path, pool_path, log_path], force)

    if cfg.data.train is None:
        raise ConfigError("[data] train_start/train_end are required for mining")

    with log_path.open("w", encoding="utf-8") as log_file:
        log_file.write("iteration,mean_reward,max_reward,pool_best_ic,entropy\n")

        def hook(entry):
            log_file.write(
                f"{entry.iteration},{entry.mean_reward!r},{entry.max_reward!r},"
                f"{entry.pool_best!r},{entry.entropy!r}\n"
            )
            log_file.flush()

        if cfg.transfer_enabled:
            if cfg.data.pretrain is None:
                raise ConfigError("[transfer] needs [data] pretrain_start/pretrain_end")
            SplitSpec(cfg.data.pretrain, cfg.data.train,
                      _eval_range(cfg) or cfg.data.train)
            historical = _window(panel, target, cfg.data.pretrain)
            recent = _window(panel, target, cfg.data.train)
            checkpoint, pool, logs = pretrain_then_transfer(
                historical, recent, catalog, cfg.train, log_hook=hook
            )
        else:
            train_panel, train_target = _window(panel, target, cfg.data.train)
            trainer = Trainer(train_panel, train_target, catalog, cfg.train)
            logs = trainer.train(cfg.train.iterations, log_hook=hook)
            checkpoint, pool = trainer.checkpoint(), trainer.pool

    checkpoint.save(checkpoint_path)
    write_pool(pool, catalog, pool_path)

    best = pool.best_score
    return MineResult(checkpoint_path, pool_path, log_path, len(logs), best,
                      len(pool.entries))


@dataclass
class EvalRow:
    formula: str
    option_id: int
    ic_star: float
    ic_star_std: float
    rank_ic_star: float
    rank_ic_star_std: float
    ir_star: float | None
    n_days: int


def run_eval(config_path: str | Path, pool_path: str | Path, out_path: str | Path,
             force: bool = False, seed: int | None = None,
             threads: int | None = None) -> list[EvalRow]:
    cfg = load_run_config(config_path, seed, threads)
    catalog = default_catalog()
    out_path = Path(out_path)
    _refuse_existing([out_path], force)

    entries = read_pool_file(
        pool_path, catalog,
        max_length=cfg.train.max_length, include_pow=cfg.train.include_pow,
    )
    panel, target = _load_panel_and_target(cfg)
    panel, target = _window(panel, target, _eval_range(cfg))

    rows = []
    for expr, _score in entries:
        values = evaluate(expr, catalog, panel, cfg.train.aggregation)
        series = ic_series(values, target)
        rows.append(
            EvalRow(
                formula=serialize(expr, catalog),
                option_id=expr.option_id,
                ic_star=series.ic_star,
                ic_star_std=series.ic_std,
                rank_ic_star=series.rank_ic_star,
                rank_ic_star_std=series.rank_ic_std,
                ir_star=series.ir_star,
                n_days=series.n_days,
            )
        )
    rows.sort(key=lambda r: -r.ic_star)

    with out_path.open("w", encoding="utf-8") as fh:
        fh.write(
            "formula,option_id,ic_star,ic_star_std,rank_ic_star,"
            "rank_ic_star_std,ir_star,n_days\n"
        )
        for r in rows:
            ir = repr(r.ir_star) if r.ir_star is not None else ""
            fh.write(
                f"\"{r.formula}\",{r.option_id},{r.ic_star!r},{r.ic_star_std!r},"
                f"{r.rank_ic_star!r},{r.rank_ic_star_std!r},{ir},{r.n_days}\n"
            )
    return rows


@dataclass
class BacktestRun:
    formula: str
    option_id: int
    result_path: Path
    summary_path: Path
    plot_path: Path | None
    total_return: float
    max_drawdown: float
    volatility: float


def run_backtest_job(config_path: str | Path, pool_path: str | Path,
                     out_dir: str | Path, force: bool = False, plot: bool = False,
                     seed: int | None = None, threads: int | None = None
                     ) -> list[BacktestRun]:
    cfg = load_run_config(config_path, seed, threads)
    catalog = default_catalog()
    entries = read_pool_file(
        pool_path, catalog,
        max_length=cfg.train.max_length, include_pow=cfg.train.include_pow,
    )
    panel, target = _load_panel_and_target(cfg)
    panel, _ = _window(panel, target, _eval_range(cfg))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    planned: list[Path] = []
    for i in range(len(entries)):
        planned += [out / f"factor_{i:03d}.csv", out / f"factor_{i:03d}_summary.txt"]
        if plot:
            planned.append(out / f"factor_{i:03d}.png")
    _refuse_existing(planned, force)

    runs = []
    for i, (expr, _score) in enumerate(entries):
        result = bt.run_backtest(expr, catalog, panel, cfg.portfolio, cfg.train.aggregation)
        result_path = out / f"factor_{i:03d}.csv"
        summary_path = out / f"factor_{i:03d}_summary.txt"
        bt.write_result_csv(result, result_path)
        summary_path.write_text(bt.summary_text(result), encoding="utf-8")
        plot_path = None
        if plot:
            plot_path = out / f"factor_{i:03d}.png"
            bt.plot_net_value(result, plot_path, label=serialize(expr, catalog))
        runs.append(
            BacktestRun(
                formula=serialize(expr, catalog),
                option_id=expr.option_id,
                result_path=result_path,
                summary_path=summary_path,
                plot_path=plot_path,
                total_return=result.total_return,
                max_drawdown=result.max_drawdown,
                volatility=result.volatility,
            )
        )
    return runs


def parse_formula(text: str, include_pow: bool = False,
                  option_id: int | None = None) -> tuple[FactorExpr, OptionCatalog, str]:
    """Parse a formula against the default catalog; returns the canonical text."""
    catalog = default_catalog()
    expr = parse(text, catalog, include_pow=include_pow, option_id=option_id)
    return expr, catalog, serialize(expr, catalog)
