"""INI run configuration: one file drives synth, mine, eval, and backtest.

Every key is validated against the schema below before any work starts;
unknown sections or keys are errors.  Values given on the command line
(--seed, --threads) override the file.
"""

from __future__ import annotations

import configparser
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

from .backtest import PortfolioConfig
from .data import DateRange
from .errors import ConfigError
from .trainer import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _parse_optional_float(text: str) -> float | None:
    stripped = text.strip()
    return None if stripped.lower() in ("", "none") else float(stripped)


# section -> key -> parser
_SCHEMA: dict[str, dict[str, object]] = {
    "run": {"seed": int, "threads": int},
    "data": {
        "path": str,
        "target_path": str,
        "market_minutes": int,
        "pretrain_start": _parse_date,
        "pretrain_end": _parse_date,
        "train_start": _parse_date,
        "train_end": _parse_date,
        "eval_start": _parse_date,
        "eval_end": _parse_date,
    },
    "data.synthetic": {
        "symbols": int,
        "days": int,
        "minutes": int,
        "noise_sd": float,
        "formula": str,
    },
    "policy": {
        "embed_dim": int,
        "heads": int,
        "hidden_high": int,
        "hidden_low": int,
        "hidden_baseline": int,
        "value_readout": _parse_bool,
        "include_pow": _parse_bool,
        "max_length": int,
        "aggregation": str,
    },
    "train": {
        "rollout_length": int,
        "ppo_epochs": int,
        "clip_eps": float,
        "lr_high": float,
        "lr_low": float,
        "lr_baseline": float,
        "entropy_coef": float,
        "gamma": float,
        "normalize_advantages": _parse_bool,
        "iterations": int,
        "target_pool_ic": _parse_optional_float,
        "reward_mask_threshold": float,
        "reward_rank_weight": float,
        "reward_ir_weight": float,
    },
    "transfer": {
        "pretrain_iterations": int,
        "reset_high_level": _parse_bool,
    },
    "pool": {
        "capacity": int,
        "correlation_cap": float,
    },
    "backtest": {
        "top_n": int,
        "selection": str,
        "cost_bps": float,
    },
}


@dataclass
class DataConfig:
    path: Path | None = None
    target_path: Path | None = None
    market_minutes: int = 390
    pretrain: DateRange | None = None
    train: DateRange | None = None
    eval: DateRange | None = None


@dataclass
class SyntheticConfig:
    symbols: int
    days: int
    minutes: int
    noise_sd: float
    formula: str


@dataclass
class RunConfig:
    seed: int
    threads: int
    data: DataConfig
    synthetic: SyntheticConfig | None
    train: TrainConfig
    transfer_enabled: bool
    portfolio: PortfolioConfig

    def require_synthetic(self) -> SyntheticConfig:
        if self.synthetic is None:
            raise ConfigError("this command needs a [data.synthetic] section")
        return self.synthetic

    def require_data_path(self) -> Path:
        if self.data.path is None:
            raise ConfigError("this command needs [data] path")
        return self.data.path


def _validated_sections(path: Path) -> dict[str, dict[str, object]]:
    parser = configparser.ConfigParser(
        interpolation=None, default_section="@@no-defaults@@"
    )
    parser.optionxform = str
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"cannot read config file {path}")

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            parse = _SCHEMA[section][key]
            try:
                values[section][key] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(
                    f"bad value for {key!r} in section [{section}]: {exc}"
                ) from None
    return values


def _range(section: dict, start_key: str, end_key: str, name: str) -> DateRange | None:
    start, end = section.get(start_key), section.get(end_key)
    if start is None and end is None:
        return None
    if start is None or end is None:
        raise ConfigError(f"[data] {name} range needs both {start_key} and {end_key}")
    return DateRange(start, end)


def load_run_config(
    path: str | Path,
    seed_override: int | None = None,
    threads_override: int | None = None,
) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    values = _validated_sections(path)

    run = values.get("run", {})
    seed = seed_override if seed_override is not None else run.get("seed", 0)
    threads = threads_override if threads_override is not None else run.get("threads", 1)
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")

    d = values.get("data", {})
    data = DataConfig(
        path=Path(d["path"]) if "path" in d else None,
        target_path=Path(d["target_path"]) if "target_path" in d else None,
        market_minutes=d.get("market_minutes", 390),
        pretrain=_range(d, "pretrain_start", "pretrain_end", "pretrain"),
        train=_range(d, "train_start", "train_end", "train"),
        eval=_range(d, "eval_start", "eval_end", "eval"),
    )

    synth = None
    if "data.synthetic" in values:
        s = values["data.synthetic"]
        for key in ("symbols", "days", "minutes", "formula"):
            if key not in s:
                raise ConfigError(f"[data.synthetic] is missing key {key!r}")
        synth = SyntheticConfig(
            symbols=s["symbols"],
            days=s["days"],
            minutes=s["minutes"],
            noise_sd=s.get("noise_sd", 0.0),
            formula=s["formula"],
        )

    merged = {**values.get("policy", {}), **values.get("train", {})}
    transfer_enabled = "transfer" in values
    merged.update(values.get("transfer", {}))
    pool = values.get("pool", {})
    if "capacity" in pool:
        merged["pool_capacity"] = pool["capacity"]
    if "correlation_cap" in pool:
        merged["correlation_cap"] = pool["correlation_cap"]
    merged["seed"] = seed
    merged["threads"] = threads
    try:
        train = TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad train configuration: {exc}") from None
    if train.aggregation not in ("mean", "last"):
        raise ConfigError(f"aggregation must be 'mean' or 'last', got {train.aggregation!r}")

    try:
        portfolio = PortfolioConfig(**values.get("backtest", {}))
    except TypeError as exc:
        raise ConfigError(f"bad backtest configuration: {exc}") from None

    return RunConfig(
        seed=seed,
        threads=threads,
        data=data,
        synthetic=synth,
        train=train,
        transfer_enabled=transfer_enabled,
        portfolio=portfolio,
    )
