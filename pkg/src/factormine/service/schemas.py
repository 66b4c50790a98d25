"""Pydantic request/response models for the HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ParseRequest(BaseModel):
    text: str
    include_pow: bool = False
    option_id: int | None = None


class ParseResponse(BaseModel):
    tokens: list[str]
    option_id: int
    length: int
    canonical: str


class JobRequest(BaseModel):
    config_path: str
    force: bool = False
    seed: int | None = None
    threads: int | None = None


class SynthRequest(JobRequest):
    out_dir: str


class SynthResponse(BaseModel):
    panel_path: str
    target_path: str
    formula: str
    option_id: int
    measured_ic: float


class MineRequest(JobRequest):
    out_dir: str


class MineResponse(BaseModel):
    checkpoint_path: str
    pool_path: str
    log_path: str
    iterations_run: int
    pool_best: float
    pool_size: int


class EvalRequest(JobRequest):
    pool_path: str
    out_path: str


class EvalRow(BaseModel):
    formula: str
    option_id: int
    ic_star: float
    ic_star_std: float
    rank_ic_star: float
    rank_ic_star_std: float
    ir_star: float | None = None
    n_days: int


class EvalResponse(BaseModel):
    report_path: str
    rows: list[EvalRow]


class BacktestRequest(JobRequest):
    pool_path: str
    out_dir: str
    plot: bool = False


class BacktestRun(BaseModel):
    formula: str
    option_id: int
    result_path: str
    summary_path: str
    plot_path: str | None = None
    total_return: float
    max_drawdown: float
    volatility: float


class BacktestResponse(BaseModel):
    runs: list[BacktestRun] = Field(default_factory=list)
