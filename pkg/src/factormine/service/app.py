"""FastAPI application wrapping the runner layer.

Jobs run synchronously in the request (this is an internal tool for
desk-scale data); errors map to 400 for usage/configuration problems,
422 for data problems, and 500 for training failures.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from .. import errors as err
from .. import runner
from ..expr import Vocabulary
from . import schemas

_STATUS_FOR = {
    err.ConfigError: 400,
    err.UsageError: 400,
    err.FormatError: 422,
    err.ParseError: 422,
    err.InsufficientDataError: 422,
    err.DataDomainError: 422,
    err.DegenerateCorrelationError: 422,
    err.ExprError: 422,
    err.BacktestError: 422,
    err.TrainingError: 500,
    err.ShapeError: 500,
}


def create_app() -> FastAPI:
    app = FastAPI(title="factormine", version=__version__)

    @app.exception_handler(err.FactormineError)
    async def factormine_error(_request: Request, exc: err.FactormineError):
        status = _STATUS_FOR.get(type(exc), 500)
        return JSONResponse(
            status_code=status,
            content={"detail": str(exc), "kind": type(exc).__name__},
        )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/expressions/parse", response_model=schemas.ParseResponse)
    def parse_expression(req: schemas.ParseRequest):
        expr, _catalog, canonical = runner.parse_formula(
            req.text, include_pow=req.include_pow, option_id=req.option_id
        )
        vocab = Vocabulary(include_pow=True)
        return schemas.ParseResponse(
            tokens=[vocab.name(t) for t in expr.tokens],
            option_id=expr.option_id,
            length=len(expr.tokens),
            canonical=canonical,
        )

    @app.post("/runs/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        res = runner.run_synth(
            req.config_path, req.out_dir, force=req.force,
            seed=req.seed, threads=req.threads,
        )
        return schemas.SynthResponse(
            panel_path=str(res.panel_path),
            target_path=str(res.target_path),
            formula=res.formula,
            option_id=res.option_id,
            measured_ic=res.measured_ic,
        )

    @app.post("/runs/mine", response_model=schemas.MineResponse)
    def mine(req: schemas.MineRequest):
        res = runner.run_mine(
            req.config_path, req.out_dir, force=req.force,
            seed=req.seed, threads=req.threads,
        )
        return schemas.MineResponse(
            checkpoint_path=str(res.checkpoint_path),
            pool_path=str(res.pool_path),
            log_path=str(res.log_path),
            iterations_run=res.iterations_run,
            pool_best=res.pool_best,
            pool_size=res.pool_size,
        )

    @app.post("/runs/eval", response_model=schemas.EvalResponse)
    def eval_pool(req: schemas.EvalRequest):
        rows = runner.run_eval(
            req.config_path, req.pool_path, req.out_path, force=req.force,
            seed=req.seed, threads=req.threads,
        )
        return schemas.EvalResponse(
            report_path=req.out_path,
            rows=[
                schemas.EvalRow(
                    formula=r.formula,
                    option_id=r.option_id,
                    ic_star=r.ic_star,
                    ic_star_std=r.ic_star_std,
                    rank_ic_star=r.rank_ic_star,
                    rank_ic_star_std=r.rank_ic_star_std,
                    ir_star=r.ir_star,
                    n_days=r.n_days,
                )
                for r in rows
            ],
        )

    @app.post("/runs/backtest", response_model=schemas.BacktestResponse)
    def backtest(req: schemas.BacktestRequest):
        runs = runner.run_backtest_job(
            req.config_path, req.pool_path, req.out_dir, force=req.force,
            plot=req.plot, seed=req.seed, threads=req.threads,
        )
        return schemas.BacktestResponse(
            runs=[
                schemas.BacktestRun(
                    formula=r.formula,
                    option_id=r.option_id,
                    result_path=str(r.result_path),
                    summary_path=str(r.summary_path),
                    plot_path=str(r.plot_path) if r.plot_path else None,
                    total_return=r.total_return,
                    max_drawdown=r.max_drawdown,
                    volatility=r.volatility,
                )
                for r in runs
            ]
        )

    return app
