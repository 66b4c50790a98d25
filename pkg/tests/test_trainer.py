"""Rollout collection, returns/advantages, PPO updates, transfer protocol."""

import numpy as np
import pytest

from factormine.data import generate_synthetic
from factormine.errors import ConfigError
from factormine.expr import FactorExpr, default_catalog, is_complete
from factormine.metrics import write_pool
from factormine.nn import Tensor
from factormine.policies import baseline_high
from factormine.trainer import (
    Trainer,
    TrainConfig,
    TransferCheckpoint,
    compute_returns_advantages,
    pretrain_then_transfer,
)

from conftest import ADD, OPEN, VOCAB_POW, VOLUME


def synth(seed=11, n_symbols=10, n_days=12, minutes=4, option=3, noise=0.0):
    catalog = default_catalog()
    planted = FactorExpr((ADD, OPEN, VOLUME), option)
    panel, target = generate_synthetic(
        n_symbols, n_days, minutes, seed=seed,
        planted_formula=planted, catalog=catalog, noise_sd=noise,
    )
    return catalog, panel, target


def small_config(**overrides):
    defaults = dict(
        rollout_length=16, ppo_epochs=2, iterations=3, embed_dim=8,
        hidden_high=8, hidden_low=16, hidden_baseline=8, seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(clip_eps=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(gamma=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(gamma=1.2)

    def test_fingerprint_stable(self):
        assert TrainConfig().fingerprint() == TrainConfig().fingerprint()
        assert TrainConfig().fingerprint() != TrainConfig(seed=9).fingerprint()


class TestCollectRollout:
    def test_single_step_contract(self):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config(rollout_length=1))
        steps, candidates = tr.collect_rollout()
        assert len(steps) == 1
        s = steps[0]
        assert is_complete(s.tokens, VOCAB_POW)
        assert 0.0 <= s.reward <= 1.0
        assert len(candidates) == 1

    def test_determinism(self):
        catalog, panel, target = synth()
        a = Trainer(panel, target, catalog, small_config())
        b = Trainer(panel, target, catalog, small_config())
        sa, _ = a.collect_rollout()
        sb, _ = b.collect_rollout()
        assert [s.tokens for s in sa] == [s.tokens for s in sb]
        assert [s.option for s in sa] == [s.option for s in sb]
        np.testing.assert_array_equal(
            [s.reward for s in sa], [s.reward for s in sb]
        )

    def test_day_cycling_recorded(self):
        catalog, panel, target = synth(n_days=5)
        tr = Trainer(panel, target, catalog, small_config(rollout_length=16))
        tr.collect_rollout()
        assert tr.wrapped_days >= 3

    def test_every_sampled_expression_valid(self):
        catalog, panel, target = synth()
        cfg = small_config(rollout_length=64)
        tr = Trainer(panel, target, catalog, cfg)
        steps, _ = tr.collect_rollout()
        for s in steps:
            assert is_complete(s.tokens, VOCAB_POW)
            assert 1 <= len(s.tokens) <= cfg.max_length

    def test_sampling_statistics(self):
        # untrained policies, 1000 sampled expressions on noiseless
        # synthetic data: the best draw beats the median draw
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config(rollout_length=1000))
        steps, _ = tr.collect_rollout()
        rewards = np.array([s.reward for s in steps])
        assert rewards.max() > np.median(rewards)

    def test_eq6_identity_at_every_step(self):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config(rollout_length=64))
        steps, _ = tr.collect_rollout()
        for s in steps:
            svec = s.state.vector()
            probs = tr.high.dist(svec).probs()
            explicit = sum(
                probs[k] * tr.baseline.value(svec, tr.high.embedding.row(k))
                for k in range(catalog.n_options)
            )
            assert abs(s.b_high - explicit) < 1e-9
            assert abs(s.b_low - tr.baseline.value(
                svec, tr.high.embedding.row(s.option))) < 1e-12


class TestReturnsAdvantages:
    def _steps(self, rewards, b_high=0.0, b_low=0.0):
        catalog, panel, target = synth(n_days=6)
        tr = Trainer(panel, target, catalog, small_config(rollout_length=len(rewards)))
        steps, _ = tr.collect_rollout()
        for s, r in zip(steps, rewards):
            s.reward = r
            s.b_high = b_high
            s.b_low = b_low
        return steps

    def test_suffix_sums(self):
        steps = self._steps([1.0, 2.0, 3.0])
        compute_returns_advantages(steps, TrainConfig(gamma=1.0,
                                                      normalize_advantages=False))
        assert [s.ret for s in steps] == [6.0, 5.0, 3.0]

    def test_zero_baselines_advantages_equal_returns(self):
        steps = self._steps([0.5, 0.25, 1.0])
        adv_opt, adv_tok = compute_returns_advantages(
            steps, TrainConfig(normalize_advantages=False)
        )
        np.testing.assert_array_equal(adv_opt, [s.ret for s in steps])
        np.testing.assert_array_equal(adv_tok, [s.ret for s in steps])

    def test_discounted_recursion(self):
        steps = self._steps([1.0, 1.0, 1.0])
        compute_returns_advantages(steps, TrainConfig(gamma=0.9,
                                                      normalize_advantages=False))
        rets = [s.ret for s in steps]
        assert abs(rets[0] - 2.71) < 1e-12
        assert abs(rets[1] - 1.9) < 1e-12
        assert rets[2] == 1.0

    def test_raw_fields_survive_normalization(self):
        steps = self._steps([0.1, 0.9, 0.4], b_high=0.2, b_low=0.3)
        adv_opt, adv_tok = compute_returns_advantages(
            steps, TrainConfig(normalize_advantages=True)
        )
        for s in steps:
            assert s.adv_option == s.ret - s.b_high
            assert s.adv_tokens == s.ret - s.b_low
        assert abs(np.mean(adv_opt)) < 1e-12
        assert abs(np.std(adv_opt) - 1.0) < 1e-6


class TestBaselineHigh:
    def test_matches_explicit_summation(self, rng):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config())
        for _ in range(5):
            svec = np.concatenate([rng.normal(size=6), rng.normal(size=8)])
            explicit = sum(
                tr.high.dist(svec).probs()[k]
                * tr.baseline.value(svec, tr.high.embedding.row(k))
                for k in range(catalog.n_options)
            )
            assert abs(baseline_high(svec, tr.high, tr.baseline) - explicit) < 1e-12

    def test_uniform_policy_averages(self, rng):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config())
        tr.high.embedding.matrix.data = np.zeros_like(tr.high.embedding.matrix.data)
        svec = np.concatenate([rng.normal(size=6), np.zeros(8)])
        values = tr.baseline.values_all_options(svec, tr.high.embedding.matrix.data)
        assert abs(baseline_high(svec, tr.high, tr.baseline) - values.mean()) < 1e-12

    def test_near_one_hot_policy(self, rng):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config())
        svec = np.concatenate([rng.normal(size=6), rng.normal(size=8)])
        q = tr.high.query_net.forward_array(svec)
        matrix = np.full((catalog.n_options, 8), 0.0)
        matrix[2] = 1000.0 * q / np.linalg.norm(q)
        tr.high.embedding.matrix.data = matrix
        expected = tr.baseline.value(svec, tr.high.embedding.row(2))
        assert abs(baseline_high(svec, tr.high, tr.baseline) - expected) < 1e-9


class TestPpoUpdate:
    def test_clip_arithmetic(self):
        # single sample, Adv = 1, ratio = 2, eps = 0.2: objective min(2, 1.2)
        log_ratio = Tensor(np.array([np.log(2.0)]))
        value = Trainer._clipped_surrogate(log_ratio, np.array([1.0]), 0.2)
        assert abs(value.item() - 1.2) < 1e-12

    def test_ratio_one_identity(self):
        log_ratio = Tensor(np.zeros(6))
        adv = np.array([0.5, -0.25, 1.0, 0.0, -1.0, 2.0])
        value = Trainer._clipped_surrogate(log_ratio, adv, 0.2)
        assert abs(value.item() - adv.mean()) < 1e-12

    def test_positive_advantage_logprob_rises(self):
        catalog, panel, target = synth()
        cfg = small_config(lr_high=1e-2, lr_low=1e-2, lr_baseline=1e-2,
                           rollout_length=32)
        tr = Trainer(panel, target, catalog, cfg)
        steps, _ = tr.collect_rollout()
        adv_opt, adv_tok = compute_returns_advantages(steps, cfg)

        def token_logprobs():
            ti, tm, tc, seg = tr._token_batch(steps)
            lp_rows, _ = tr.low.batched_log_probs(ti, tm, tc)
            return (Tensor(seg).matmul(lp_rows)).data.copy()

        before = token_logprobs()
        tr.ppo_update(steps, adv_opt, adv_tok)
        after = token_logprobs()
        delta = after - before
        assert delta[adv_tok > 0].mean() > 0
        assert delta[adv_tok > 0].mean() > delta[adv_tok < 0].mean()

    def test_huge_clip_one_epoch_matches_vanilla_pg(self):
        catalog, panel, target = synth()
        cfg = small_config(rollout_length=24)
        tr = Trainer(panel, target, catalog, cfg)
        steps, _ = tr.collect_rollout()
        adv_opt, adv_tok = compute_returns_advantages(steps, cfg)

        ti, tm, tc, seg = tr._token_batch(steps)
        old = np.asarray([s.token_logprobs.sum() for s in steps])

        def grad_of(loss):
            from factormine.nn import zero_grads

            params = tr.low.parameters()
            zero_grads(params)
            loss.backward()
            return np.concatenate([p.grad.ravel() for p in params.values()])

        lp_rows, _ = tr.low.batched_log_probs(ti, tm, tc)
        lp = Tensor(seg).matmul(lp_rows)
        clipped = -Trainer._clipped_surrogate(lp - Tensor(old), adv_tok, 1e6 - 1e-9)
        # clip bound far beyond any realized ratio: identical to vanilla PG
        g_clip = grad_of(clipped)

        lp_rows2, _ = tr.low.batched_log_probs(ti, tm, tc)
        lp2 = Tensor(seg).matmul(lp_rows2)
        vanilla = -(((lp2 - Tensor(old)).exp() * Tensor(adv_tok)).mean())
        g_vanilla = grad_of(vanilla)

        cos = g_clip @ g_vanilla / (np.linalg.norm(g_clip) * np.linalg.norm(g_vanilla))
        assert cos > 0.999

    def test_freeze_contract(self):
        catalog, panel, target = synth()
        cfg = small_config(rollout_length=16, lr_high=1e-2, lr_low=1e-2)
        tr = Trainer(panel, target, catalog, cfg, freeze_low=True)
        phi_before = {k: v.data.tobytes() for k, v in tr.low.parameters().items()}
        emb_before = tr.high.embedding.matrix.data.tobytes()
        theta_before = {k: v.data.tobytes()
                        for k, v in tr.high.policy_parameters().items()}
        tr.train(2, stop_at_target=False)
        assert all(tr.low.parameters()[k].data.tobytes() == v
                   for k, v in phi_before.items())
        assert tr.high.embedding.matrix.data.tobytes() == emb_before
        assert any(tr.high.policy_parameters()[k].data.tobytes() != v
                   for k, v in theta_before.items())


class TestDeterminismAndCheckpoints:
    def test_full_run_determinism(self, tmp_path):
        catalog, panel, target = synth()
        results = []
        for run in range(2):
            tr = Trainer(panel, target, catalog, small_config(iterations=3))
            tr.train(3, stop_at_target=False)
            pool_path = tmp_path / f"pool_{run}.tsv"
            write_pool(tr.pool, catalog, pool_path)
            ck_path = tmp_path / f"ck_{run}.bin"
            tr.checkpoint().save(ck_path)
            results.append((pool_path.read_bytes(), ck_path.read_bytes()))
        assert results[0][0] == results[1][0]
        assert results[0][1] == results[1][1]

    def test_checkpoint_reload_reproduces_outputs(self, tmp_path, rng):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config())
        tr.train(2, stop_at_target=False)
        path = tmp_path / "ck.bin"
        tr.checkpoint().save(path)

        svec = np.concatenate([rng.normal(size=6), rng.normal(size=8)])
        before = tr.high.logits_array(svec).copy()

        fresh = Trainer(panel, target, catalog, small_config(seed=123))
        assert not np.array_equal(fresh.high.logits_array(svec), before)
        fresh.load_arrays(TransferCheckpoint.load(path).arrays)
        np.testing.assert_array_equal(fresh.high.logits_array(svec), before)

    def test_checkpoint_shape_mismatch_rejected(self, tmp_path):
        catalog, panel, target = synth()
        tr = Trainer(panel, target, catalog, small_config())
        ck = tr.checkpoint()
        ck.arrays["high.w0"] = np.zeros((2, 2))
        with pytest.raises(ConfigError):
            tr.load_arrays(ck.arrays)


class TestTransfer:
    def test_freeze_and_pool(self):
        catalog, panel, target = synth(n_days=10)
        cfg = small_config(iterations=2, pretrain_iterations=2)
        historical = (panel, target)
        catalog2, panel2, target2 = synth(seed=12, n_days=10, option=1)
        checkpoint, pool, logs = pretrain_then_transfer(
            historical, (panel2, target2), catalog, cfg
        )
        assert len(logs) == 2
        assert "low.w0" in checkpoint.arrays
        assert checkpoint.config_fingerprint == cfg.fingerprint()

    def test_phase2_freezes_low_and_embedding(self):
        catalog, panel, target = synth(n_days=10)
        cfg = small_config(iterations=2, pretrain_iterations=1,
                           lr_high=1e-2, lr_low=1e-2)
        seed_phase = Trainer(panel, target, catalog, cfg,
                             seed_seq=np.random.SeedSequence(cfg.seed).spawn(3)[0])
        seed_phase.train(1, stop_at_target=False)
        phi = {k: v.data.copy() for k, v in seed_phase.low.parameters().items()}
        emb = seed_phase.high.embedding.matrix.data.copy()

        checkpoint, _pool, _logs = pretrain_then_transfer(
            (panel, target), (panel, target), catalog, cfg
        )
        for k, v in phi.items():
            np.testing.assert_array_equal(checkpoint.arrays[k], v)
        np.testing.assert_array_equal(checkpoint.arrays["embed.matrix"], emb)

    def test_minutes_mismatch_rejected(self):
        catalog, panel, target = synth(minutes=4)
        _, panel2, target2 = synth(minutes=5)
        with pytest.raises(ConfigError):
            pretrain_then_transfer((panel, target), (panel2, target2),
                                   catalog, small_config())

    def test_identical_data_transfer_not_worse_than_scratch(self):
        # recent data identical to historical: the phase-2 mean-reward
        # trajectory should not sit below a from-scratch median
        catalog, panel, target = synth(n_days=10)
        transfer_means, scratch_means = [], []
        for seed in range(5):
            cfg = small_config(seed=seed, iterations=10, pretrain_iterations=8,
                               rollout_length=24)
            _ck, _pool, logs = pretrain_then_transfer(
                (panel, target), (panel, target), catalog, cfg
            )
            transfer_means.append(np.mean([l.mean_reward for l in logs]))
            scratch = Trainer(panel, target, catalog,
                              small_config(seed=seed, rollout_length=24))
            slogs = scratch.train(10, stop_at_target=False)
            scratch_means.append(np.mean([l.mean_reward for l in slogs]))
        assert np.median(transfer_means) >= np.median(scratch_means) - 0.02
