"""Command-line surface: synth, mine, eval, backtest, serve.

The commands are thin wrappers over the runner layer (the same layer the
HTTP service wraps).  Exit codes: 0 success, 1 usage or configuration
error, 2 data error, 3 training error.
"""

from __future__ import annotations

import sys

import click

from . import __version__
from . import errors as err
from . import runner


@click.group(help="Mine, evaluate, and backtest intraday risk factors.")
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration file (INI).")
@click.option("--seed", type=int, default=None, help="Override the configured seed.")
@click.option("--threads", type=int, default=None, help="Cap evaluation worker threads.")
@click.option("--force", is_flag=True, default=False, help="Overwrite existing outputs.")
@click.pass_context
def cli(ctx, config_path, seed, threads, force):
    ctx.obj = {
        "config_path": config_path,
        "seed": seed,
        "threads": threads,
        "force": force,
    }


def _need_config(ctx) -> str:
    path = ctx.obj["config_path"]
    if path is None:
        raise err.UsageError("this command needs --config")
    return path


@cli.command(help="Generate a synthetic panel and target with a planted formula.")
@click.argument("out_dir", type=click.Path())
@click.pass_context
def synth(ctx, out_dir):
    res = runner.run_synth(
        _need_config(ctx), out_dir, force=ctx.obj["force"],
        seed=ctx.obj["seed"], threads=ctx.obj["threads"],
    )
    click.echo(f"panel:   {res.panel_path}")
    click.echo(f"target:  {res.target_path}")
    click.echo(f"planted: {res.formula} (option {res.option_id})")
    click.echo(f"ic:      {res.measured_ic!r}")


@cli.command(help="Run the mining loop (single phase, or pretrain+transfer).")
@click.argument("out_dir", type=click.Path())
@click.pass_context
def mine(ctx, out_dir):
    res = runner.run_mine(
        _need_config(ctx), out_dir, force=ctx.obj["force"],
        seed=ctx.obj["seed"], threads=ctx.obj["threads"],
    )
    click.echo(f"checkpoint: {res.checkpoint_path}")
    click.echo(f"pool:       {res.pool_path} ({res.pool_size} factors)")
    click.echo(f"log:        {res.log_path}")
    click.echo(f"iterations: {res.iterations_run}")
    click.echo(f"best ic:    {res.pool_best!r}")


@cli.command(name="eval", help="Score a factor pool on the evaluation window.")
@click.argument("pool_file", type=click.Path())
@click.argument("out_csv", type=click.Path())
@click.pass_context
def eval_cmd(ctx, pool_file, out_csv):
    rows = runner.run_eval(
        _need_config(ctx), pool_file, out_csv, force=ctx.obj["force"],
        seed=ctx.obj["seed"], threads=ctx.obj["threads"],
    )
    click.echo(f"wrote {len(rows)} rows to {out_csv}")
    for r in rows:
        click.echo(f"  ic*={r.ic_star:+.4f}  {r.formula}")


@cli.command(help="Backtest every factor in a pool file.")
@click.argument("pool_file", type=click.Path())
@click.argument("out_dir", type=click.Path())
@click.option("--plot", is_flag=True, default=False, help="Write net-value plots.")
@click.pass_context
def backtest(ctx, pool_file, out_dir, plot):
    runs = runner.run_backtest_job(
        _need_config(ctx), pool_file, out_dir, force=ctx.obj["force"], plot=plot,
        seed=ctx.obj["seed"], threads=ctx.obj["threads"],
    )
    for r in runs:
        click.echo(
            f"total_return={r.total_return:+.4f} max_dd={r.max_drawdown:.4f} "
            f"vol={r.volatility:.5f}  {r.formula}"
        )


@cli.command(help="Serve the HTTP API.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


_EXIT_USAGE = 1
_EXIT_DATA = 2
_EXIT_TRAINING = 3

_DATA_ERRORS = (
    err.FormatError,
    err.ParseError,
    err.InsufficientDataError,
    err.DataDomainError,
    err.DegenerateCorrelationError,
    err.ExprError,
    err.BacktestError,
)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:  # --help and friends
        return exc.exit_code
    except (click.UsageError, click.Abort) as exc:
        click.echo(f"usage error: {exc}", err=True)
        return _EXIT_USAGE
    except (err.ConfigError, err.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        return _EXIT_USAGE
    except _DATA_ERRORS as exc:
        click.echo(f"data error: {exc}", err=True)
        return _EXIT_DATA
    except (err.TrainingError, err.ShapeError) as exc:
        click.echo(f"training error: {exc}", err=True)
        return _EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
