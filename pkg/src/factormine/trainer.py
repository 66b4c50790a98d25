"""Two-level policy-gradient training loop with transferable options.

One rollout step = one sampled option + one decoded expression + one
scalar reward (the absolute mean daily IC of the expression).  Returns
chain across steps with an optional discount; each policy gets its own
clipped-surrogate update against its own advantage stream, and the
high-level baseline is always the exact policy expectation of the
low-level baseline, never a separate network.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Panel, RvTarget
from .errors import ConfigError, InsufficientDataError, TrainingError
from .expr import (
    FactorExpr,
    FactorValues,
    OptionCatalog,
    Vocabulary,
    evaluate,
    legal_next_tokens,
)
from .metrics import FactorPool, IcSeries, daily_pearson, ic_series, reward
from .nn import (
    Tensor,
    load_checkpoint,
    masked_log_softmax_array,
    sample_masked,
    save_checkpoint,
    sgd_step,
    zero_grads,
)
from .policies import BaselineNet, HighLevelPolicy, HighLevelState, LowLevelPolicy

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters for one training phase (all surfaced in the config file)."""

    rollout_length: int = 64
    ppo_epochs: int = 4
    clip_eps: float = 0.2
    lr_high: float = 3e-4
    lr_low: float = 3e-4
    lr_baseline: float = 3e-4
    entropy_coef: float = 0.01
    gamma: float = 1.0
    max_length: int = 15
    embed_dim: int = 16
    heads: int = 1
    hidden_high: int = 32
    hidden_low: int = 64
    hidden_baseline: int = 32
    normalize_advantages: bool = True
    iterations: int = 100
    include_pow: bool = False
    aggregation: str = "mean"
    pool_capacity: int = 10
    correlation_cap: float = 0.7
    reward_mask_threshold: float = 0.5
    reward_rank_weight: float = 0.0
    reward_ir_weight: float = 0.0
    target_pool_ic: float | None = None
    value_readout: bool = False
    pretrain_iterations: int = 100
    reset_high_level: bool = False
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.rollout_length < 1 or self.ppo_epochs < 1 or self.iterations < 0:
            raise ConfigError("rollout_length, ppo_epochs must be >= 1; iterations >= 0")
        if self.max_length < 1:
            raise ConfigError(f"max_length must be >= 1, got {self.max_length}")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class RolloutStep:
    """One (state, option, expression, reward) record with its baselines."""

    day_index: int
    state: HighLevelState
    option: int
    option_logprob: float
    option_entropy: float
    tokens: tuple[int, ...]
    token_logprobs: np.ndarray
    token_entropy: float
    expr: FactorExpr
    reward: float = 0.0
    ic_star: float | None = None
    b_high: float = 0.0
    b_low: float = 0.0
    ret: float = 0.0
    adv_option: float = 0.0
    adv_tokens: float = 0.0


@dataclass
class IterationLog:
    iteration: int
    mean_reward: float
    max_reward: float
    pool_best: float
    entropy: float
    loss_high: float = float("nan")
    loss_low: float = float("nan")
    loss_baseline: float = float("nan")


@dataclass
class TransferCheckpoint:
    """Every parameter tensor plus the RNG state; reload is bit-exact."""

    arrays: dict[str, np.ndarray]
    config_fingerprint: str
    rng_state: dict | None

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            self.arrays,
            rng_state=self.rng_state,
            meta={"config_fingerprint": self.config_fingerprint},
        )

    @classmethod
    def load(cls, path: str | Path) -> "TransferCheckpoint":
        arrays, rng_state, meta = load_checkpoint(path)
        return cls(arrays, meta.get("config_fingerprint", ""), rng_state)


@dataclass
class Candidate:
    """First evaluation of an expression within a training run."""

    expr: FactorExpr
    values: FactorValues
    reward: float
    ic_star: float | None


class ExpressionEvaluator:
    """Caches expression rewards on a fixed (panel, target) window.

    The default reward (|mean daily IC|, no rank/IR mixing) takes a
    vectorized path; mixtures fall back to the full series.  Evaluation
    is pure, so results are identical however the work is partitioned
    across threads.
    """

    def __init__(
        self,
        panel: Panel,
        target: RvTarget,
        catalog: OptionCatalog,
        config: TrainConfig,
    ):
        self.panel = panel
        self.target = target
        self.catalog = catalog
        self.config = config
        self._cache: dict[tuple[tuple[int, ...], int], tuple[float, float | None]] = {}

    def _key(self, expr: FactorExpr):
        return (expr.tokens, expr.option_id)

    def _compute(self, expr: FactorExpr) -> Candidate:
        values = evaluate(expr, self.catalog, self.panel, self.config.aggregation)
        cfg = self.config
        if cfg.reward_rank_weight != 0.0 or cfg.reward_ir_weight != 0.0:
            r = reward(
                values,
                self.target,
                mask_threshold=cfg.reward_mask_threshold,
                rank_weight=cfg.reward_rank_weight,
                ir_weight=cfg.reward_ir_weight,
            )
            try:
                ic = ic_series(values, self.target).ic_star
            except InsufficientDataError:
                ic = None
            return Candidate(expr, values, r, ic)

        daily = daily_pearson(
            values.values, values.mask, self.target.values, self.target.mask
        )
        ok = ~np.isnan(daily)
        ic = float(daily[ok].mean()) if ok.any() else None
        mostly_masked = (
            values.mask.size == 0
            or np.mean(values.mask) < 1.0 - cfg.reward_mask_threshold
        )
        r = 0.0 if (ic is None or mostly_masked) else abs(ic)
        return Candidate(expr, values, r, ic)

    def prime(self, exprs: list[FactorExpr]) -> list[Candidate]:
        """Evaluate the not-yet-seen expressions; returns them in first-seen
        order (these are the iteration's pool-admission candidates)."""
        fresh = []
        seen = set()
        for e in exprs:
            k = self._key(e)
            if k not in self._cache and k not in seen:
                seen.add(k)
                fresh.append(e)
        if not fresh:
            return []
        if self.config.threads > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                candidates = list(pool.map(self._compute, fresh))
        else:
            candidates = [self._compute(e) for e in fresh]
        for c in candidates:
            self._cache[self._key(c.expr)] = (c.reward, c.ic_star)
        return candidates

    def reward_of(self, expr: FactorExpr) -> tuple[float, float | None]:
        k = self._key(expr)
        if k not in self._cache:
            c = self._compute(expr)
            self._cache[k] = (c.reward, c.ic_star)
        return self._cache[k]

    def series_for(self, candidate: Candidate) -> IcSeries:
        return ic_series(candidate.values, self.target)


def compute_returns_advantages(
    steps: list[RolloutStep], config: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Fill suffix returns and raw advantages; return the advantage streams
    used by the update (normalized per rollout when configured)."""
    ret = 0.0
    for step in reversed(steps):
        ret = step.reward + config.gamma * ret
        step.ret = ret
        step.adv_option = step.ret - step.b_high
        step.adv_tokens = step.ret - step.b_low
    adv_opt = np.array([s.adv_option for s in steps])
    adv_tok = np.array([s.adv_tokens for s in steps])
    if config.normalize_advantages and len(steps) > 1:
        adv_opt = (adv_opt - adv_opt.mean()) / (adv_opt.std() + 1e-8)
        adv_tok = (adv_tok - adv_tok.mean()) / (adv_tok.std() + 1e-8)
    return adv_opt, adv_tok


class Trainer:
    """Single-phase training driver over one (panel, target) window."""

    def __init__(
        self,
        panel: Panel,
        target: RvTarget,
        catalog: OptionCatalog,
        config: TrainConfig,
        seed_seq: np.random.SeedSequence | None = None,
        high: HighLevelPolicy | None = None,
        low: LowLevelPolicy | None = None,
        baseline: BaselineNet | None = None,
        pool: FactorPool | None = None,
        freeze_low: bool = False,
    ):
        if panel.values.shape[:2] != target.values.shape:
            raise ConfigError("panel and target shapes disagree")
        self.panel = panel
        self.target = target
        self.catalog = catalog
        self.config = config
        self.freeze_low = freeze_low
        self.vocab = Vocabulary(include_pow=config.include_pow)

        seed_seq = seed_seq or np.random.SeedSequence(config.seed)
        init_high, init_low, init_base, rollout = seed_seq.spawn(4)
        self.high = high or HighLevelPolicy(
            catalog.n_options,
            config.embed_dim,
            config.hidden_high,
            np.random.default_rng(init_high),
            heads=config.heads,
            value_readout=config.value_readout,
        )
        self.low = low or LowLevelPolicy(
            self.vocab,
            config.embed_dim,
            config.hidden_low,
            np.random.default_rng(init_low),
            config.max_length,
        )
        self.baseline = baseline or BaselineNet(
            config.embed_dim, config.hidden_baseline, np.random.default_rng(init_base)
        )
        self.rng = np.random.default_rng(rollout)
        self.pool = pool if pool is not None else FactorPool(
            capacity=config.pool_capacity, correlation_cap=config.correlation_cap
        )
        self.evaluator = ExpressionEvaluator(panel, target, catalog, config)

        self._day_features = self._day_feature_summaries()
        self._day_cursor = 0
        self._prev_option = 0
        self.wrapped_days = 0

    # -- state encoding ----------------------------------------------------

    def _day_feature_summaries(self) -> np.ndarray:
        """Per-day cross-sectional feature means, z-scored with statistics
        from this phase's own window (no lookahead across phases)."""
        vals = self.panel.values
        mask = self.panel.mask[..., None]
        counts = mask.sum(axis=(1, 2))
        sums = (vals * mask).sum(axis=(1, 2))
        raw = np.divide(sums, np.maximum(counts, 1), where=counts > 0)
        mu = raw.mean(axis=0)
        sd = raw.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        return (raw - mu) / sd

    def _state_for_day(self, day_index: int) -> HighLevelState:
        return HighLevelState(
            features=self._day_features[day_index],
            prev_option=self._prev_option,
            prev_embedding=self.high.embedding.row(self._prev_option),
        )

    # -- rollout -------------------------------------------------------------

    def collect_rollout(self) -> tuple[list[RolloutStep], list[Candidate]]:
        steps: list[RolloutStep] = []
        full_mask = np.ones(self.catalog.n_options, dtype=bool)
        for _ in range(self.config.rollout_length):
            state = self._state_for_day(self._day_cursor)
            svec = state.vector()
            logits = self.high.logits_array(svec)
            option, opt_lp, opt_ent = sample_masked(logits, full_mask, self.rng)
            opt_emb = self.high.embedding.row(option)
            expr, token_lps, token_ent = self.low.decode(svec, opt_emb, option, self.rng)
            b_lows = self.baseline.values_all_options(svec, self.high.embedding.matrix.data)
            probs = np.exp(masked_log_softmax_array(logits, full_mask))
            steps.append(
                RolloutStep(
                    day_index=self._day_cursor,
                    state=state,
                    option=option,
                    option_logprob=opt_lp,
                    option_entropy=opt_ent,
                    tokens=expr.tokens,
                    token_logprobs=token_lps,
                    token_entropy=token_ent,
                    expr=expr,
                    b_high=float(probs @ b_lows),
                    b_low=float(b_lows[option]),
                )
            )
            self._prev_option = option
            self._day_cursor += 1
            if self._day_cursor >= self.panel.n_days:
                self._day_cursor = 0
                self.wrapped_days += 1

        candidates = self.evaluator.prime([s.expr for s in steps])
        for step in steps:
            step.reward, step.ic_star = self.evaluator.reward_of(step.expr)
        return steps, candidates

    # -- PPO -------------------------------------------------------------

    def _token_batch(self, steps: list[RolloutStep]):
        inputs, masks, chosen, seg_rows = [], [], [], []
        for b, step in enumerate(steps):
            svec = step.state.vector()
            opt_emb = self.high.embedding.row(step.option)
            partial: list[int] = []
            for tok in step.tokens:
                legal = legal_next_tokens(partial, self.config.max_length, self.vocab)
                mask = np.zeros(self.vocab.size, dtype=bool)
                mask[list(legal)] = True
                inputs.append(self.low.token_input(svec, opt_emb, partial))
                masks.append(mask)
                chosen.append(tok)
                seg_rows.append(b)
                partial.append(tok)
        seg = np.zeros((len(steps), len(chosen)))
        seg[seg_rows, np.arange(len(chosen))] = 1.0
        return (
            np.asarray(inputs),
            np.asarray(masks),
            np.asarray(chosen, dtype=int),
            seg,
        )

    @staticmethod
    def _clipped_surrogate(
        log_ratio: Tensor, advantages: np.ndarray, clip_eps: float
    ) -> Tensor:
        ratio = log_ratio.exp()
        adv = Tensor(advantages)
        unclipped = ratio * adv
        clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv
        return unclipped.minimum(clipped).mean()

    def ppo_update(
        self, steps: list[RolloutStep], adv_opt: np.ndarray, adv_tok: np.ndarray
    ) -> dict[str, float]:
        cfg = self.config
        states = np.asarray([s.state.vector() for s in steps])
        options = np.asarray([s.option for s in steps], dtype=int)
        old_opt_lp = np.asarray([s.option_logprob for s in steps])
        old_tok_lp = np.asarray([s.token_logprobs.sum() for s in steps])
        returns = np.asarray([s.ret for s in steps]).reshape(-1, 1)
        tok_inputs, tok_masks, tok_chosen, seg = self._token_batch(steps)
        base_inputs = np.asarray(
            [
                self.baseline.input_for(s.state.vector(), self.high.embedding.row(s.option))
                for s in steps
            ]
        )

        theta = self.high.policy_parameters()
        embed = self.high.embedding_parameters()
        phi = self.low.parameters()
        base = self.baseline.parameters()
        diag: dict[str, float] = {}

        for _ in range(cfg.ppo_epochs):
            # high-level policy (and the option embedding, unless frozen)
            lp_sel, logp_mat = self.high.batched_log_probs(states, options)
            surr = self._clipped_surrogate(lp_sel - Tensor(old_opt_lp), adv_opt, cfg.clip_eps)
            ent = -(logp_mat.exp() * logp_mat).sum() * (1.0 / len(steps))
            loss_high = -(surr + cfg.entropy_coef * ent)
            zero_grads({**theta, **embed})
            loss_high.backward()
            self._check_finite(loss_high, "high-level loss")
            sgd_step(theta, cfg.lr_high)
            if not self.freeze_low:
                sgd_step(embed, cfg.lr_high)

            # low-level policy
            if not self.freeze_low:
                lp_rows, logp_rows = self.low.batched_log_probs(
                    tok_inputs, tok_masks, tok_chosen
                )
                lp_expr = Tensor(seg).matmul(lp_rows)
                surr_low = self._clipped_surrogate(
                    lp_expr - Tensor(old_tok_lp), adv_tok, cfg.clip_eps
                )
                ent_low = -(logp_rows.exp() * logp_rows).sum() * (1.0 / len(tok_chosen))
                loss_low = -(surr_low + cfg.entropy_coef * ent_low)
                zero_grads(phi)
                loss_low.backward()
                self._check_finite(loss_low, "low-level loss")
                sgd_step(phi, cfg.lr_low)
                diag["loss_low"] = loss_low.item()

            # baseline regression to returns
            pred = self.baseline.net.forward(Tensor(base_inputs))
            err = pred - Tensor(returns)
            loss_base = (err * err).mean()
            zero_grads(base)
            loss_base.backward()
            self._check_finite(loss_base, "baseline loss")
            sgd_step(base, cfg.lr_baseline)

            diag["loss_high"] = loss_high.item()
            diag["loss_baseline"] = loss_base.item()
        return diag

    @staticmethod
    def _check_finite(loss: Tensor, what: str) -> None:
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite {what}")

    # -- iteration loop -------------------------------------------------------

    def _admit_candidates(self, candidates: list[Candidate]) -> None:
        for cand in candidates:
            if cand.ic_star is None:
                continue
            score = abs(cand.ic_star)
            full = len(self.pool.entries) >= self.pool.capacity
            if full and score <= self.pool.entries[-1].score:
                continue
            self.pool.admit(
                cand.expr,
                cand.values,
                series_factory=lambda c=cand: self.evaluator.series_for(c),
                score=score,
            )

    def run_iteration(self, iteration: int) -> IterationLog:
        steps, candidates = self.collect_rollout()
        adv_opt, adv_tok = compute_returns_advantages(steps, self.config)
        try:
            diag = self.ppo_update(steps, adv_opt, adv_tok)
        except TrainingError as exc:
            raise TrainingError(f"iteration {iteration}: {exc}") from exc
        self._admit_candidates(candidates)

        rewards = np.array([s.reward for s in steps])
        ent_all = [s.option_entropy for s in steps] + [s.token_entropy for s in steps]
        return IterationLog(
            iteration=iteration,
            mean_reward=float(rewards.mean()),
            max_reward=float(rewards.max()),
            pool_best=self.pool.best_score,
            entropy=float(np.mean(ent_all)),
            loss_high=diag.get("loss_high", float("nan")),
            loss_low=diag.get("loss_low", float("nan")),
            loss_baseline=diag.get("loss_baseline", float("nan")),
        )

    def train(
        self, iterations: int, log_hook=None, stop_at_target: bool = True
    ) -> list[IterationLog]:
        logs = []
        for i in range(iterations):
            log = self.run_iteration(i)
            logs.append(log)
            if log_hook is not None:
                log_hook(log)
            if i % 20 == 0:
                logger.debug(
                    "iter %d mean_reward=%.4f max=%.4f pool_best=%.4f",
                    i, log.mean_reward, log.max_reward, log.pool_best,
                )
            target = self.config.target_pool_ic
            if stop_at_target and target is not None and log.pool_best >= target:
                logger.info("pool best %.4f reached target %.4f at iteration %d",
                            log.pool_best, target, i)
                break
        return logs

    # -- checkpointing ----------------------------------------------------

    def all_parameters(self) -> dict[str, Tensor]:
        return {
            **self.high.parameters(),
            **self.low.parameters(),
            **self.baseline.parameters(),
        }

    def checkpoint(self) -> TransferCheckpoint:
        arrays = {name: t.data.copy() for name, t in self.all_parameters().items()}
        return TransferCheckpoint(
            arrays=arrays,
            config_fingerprint=self.config.fingerprint(),
            rng_state=self.rng.bit_generator.state,
        )

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.all_parameters()
        for name, value in arrays.items():
            if name not in params:
                raise ConfigError(f"checkpoint array {name!r} has no matching parameter")
            if params[name].data.shape != value.shape:
                raise ConfigError(
                    f"checkpoint array {name!r} shape {value.shape} != "
                    f"{params[name].data.shape}"
                )
            params[name].data = value.copy()


def pretrain_then_transfer(
    historical: tuple[Panel, RvTarget],
    recent: tuple[Panel, RvTarget],
    catalog: OptionCatalog,
    config: TrainConfig,
    log_hook=None,
) -> tuple[TransferCheckpoint, FactorPool, list[IterationLog]]:
    """Phase 1 trains everything on historical data; phase 2 freezes the
    low-level policy and the option embedding, then fine-tunes the
    high-level policy and baselines on recent data."""
    hist_panel, hist_target = historical
    recent_panel, recent_target = recent
    if hist_panel.minutes_per_day != recent_panel.minutes_per_day:
        raise ConfigError(
            "historical and recent panels disagree on minutes_per_day: "
            f"{hist_panel.minutes_per_day} vs {recent_panel.minutes_per_day}"
        )

    seed_seq = np.random.SeedSequence(config.seed)
    phase1_seq, phase2_seq, reinit_seq = seed_seq.spawn(3)

    phase1 = Trainer(hist_panel, hist_target, catalog, config, seed_seq=phase1_seq)
    phase1.train(config.pretrain_iterations, log_hook=log_hook, stop_at_target=False)

    if config.reset_high_level:
        fresh = HighLevelPolicy(
            catalog.n_options,
            config.embed_dim,
            config.hidden_high,
            np.random.default_rng(reinit_seq),
            heads=config.heads,
            value_readout=config.value_readout,
        )
        # keep the pretrained embedding; only the query network restarts
        fresh.embedding = phase1.high.embedding
        high = fresh
    else:
        high = phase1.high

    phase2 = Trainer(
        recent_panel,
        recent_target,
        catalog,
        config,
        seed_seq=phase2_seq,
        high=high,
        low=phase1.low,
        baseline=phase1.baseline,
        freeze_low=True,
    )
    logs = phase2.train(config.iterations, log_hook=log_hook)
    return phase2.checkpoint(), phase2.pool, logs
