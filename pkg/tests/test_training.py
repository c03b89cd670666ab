import math
from dataclasses import replace

import numpy as np
import pytest

from eqco.data import AugmentedVectors, DatasetConfig, ToyInstanceDataset, make_toy_dataset, make_views
from eqco.encoder import encode_batch
from eqco.loss import LossConfig
from eqco.rng import SeededRng
from eqco.training import (
    MemoryBank,
    TrainConfig,
    linear_probe,
    lr_at_step,
    negatives_from_bank,
    negatives_in_batch,
    scaled_lr,
    simo_train_config,
    train,
    _inbatch_shared_indices,
    _subsample_indices,
)
from eqco.validation import ConfigError


def small_dataset(seed=0, n=256, d=6):
    rng = SeededRng(seed)
    return make_toy_dataset(
        rng, DatasetConfig(n_classes=4, n_instances=n, latent_dim=d, center_scale=2.0, center_spread=0.5, aug_noise_std=0.2)
    )


def tiny_config(**overrides):
    base = TrainConfig(
        loss=LossConfig(k=7, tau=0.2, margin_mode="eqco", alpha=32.0),
        n_queries=8,
        neg_source="batch",
        epochs=2,
        beta=0.9,
        hidden_dims=(16,),
        embed_dim=8,
        seed=3,
    )
    return replace(base, **overrides) if overrides else base


class TestMakeViews:
    def test_zero_noise_copies(self):
        x = SeededRng(1).standard_normal((5, 3))
        a, b = make_views(x, 0.0, SeededRng(2))
        assert np.array_equal(a, x) and np.array_equal(b, x)
        assert a is not x

    def test_reproducible(self):
        x = SeededRng(1).standard_normal((5, 3))
        a1, b1 = make_views(x, 0.5, SeededRng(9))
        a2, b2 = make_views(x, 0.5, SeededRng(9))
        assert np.array_equal(a1, a2) and np.array_equal(b1, b2)

    def test_views_independent(self):
        x = SeededRng(1).standard_normal((5, 3))
        a, b = make_views(x, 0.5, SeededRng(9))
        assert not np.array_equal(a, b)

    def test_perturbation_magnitude(self):
        """E||view - latent||^2 = d * std^2, chi-square mean at 3 sigma."""
        d, n, std = 8, 10000, 0.7
        x = np.zeros((n, d))
        a, _ = make_views(x, std, SeededRng(4))
        sq = np.sum(a * a, axis=1)
        se = float(np.std(sq, ddof=1) / math.sqrt(n))
        assert abs(float(np.mean(sq)) - d * std * std) < 3 * se


class TestMemoryBank:
    def test_fifo_keeps_last_capacity(self):
        bank = MemoryBank(8, 2)
        for i in range(12):
            bank.enqueue(np.array([[float(i), 0.0]]))
        contents = bank.as_array()[:, 0].astype(int).tolist()
        assert contents == list(range(4, 12))

    def test_batched_enqueue_order(self):
        bank = MemoryBank(5, 1)
        bank.enqueue(np.arange(3, dtype=float).reshape(3, 1))
        bank.enqueue(np.arange(3, 7, dtype=float).reshape(4, 1))
        assert bank.as_array()[:, 0].tolist() == [2.0, 3.0, 4.0, 5.0, 6.0]

    def test_oversized_enqueue_keeps_tail(self):
        bank = MemoryBank(3, 1)
        bank.enqueue(np.arange(10, dtype=float).reshape(10, 1))
        assert bank.as_array()[:, 0].tolist() == [7.0, 8.0, 9.0]

    def test_sample_all_when_size_equals_k(self):
        bank = MemoryBank(4, 2)
        keys = SeededRng(3).standard_normal((4, 2))
        bank.enqueue(keys)
        out = negatives_from_bank(bank, 4, SeededRng(0))
        assert np.array_equal(out, keys)

    def test_sample_without_replacement(self):
        bank = MemoryBank(8, 1)
        bank.enqueue(np.arange(8, dtype=float).reshape(8, 1))
        out = negatives_from_bank(bank, 4, SeededRng(5))
        vals = out[:, 0].tolist()
        assert len(set(vals)) == 4 and all(v in range(8) for v in vals)

    def test_sample_reproducible(self):
        bank = MemoryBank(8, 1)
        bank.enqueue(np.arange(8, dtype=float).reshape(8, 1))
        a = negatives_from_bank(bank, 4, SeededRng(5))
        b = negatives_from_bank(bank, 4, SeededRng(5))
        assert np.array_equal(a, b)

    def test_insufficient_keys_raise(self):
        bank = MemoryBank(8, 1)
        bank.enqueue(np.zeros((3, 1)))
        with pytest.raises(ConfigError):
            negatives_from_bank(bank, 4, SeededRng(0))


class TestInBatchNegatives:
    def test_full_negatives_in_order(self):
        keys = np.arange(8, dtype=float).reshape(8, 1)
        out = negatives_in_batch(keys, 3, 7, SeededRng(0))
        assert out[:, 0].tolist() == [0.0, 1.0, 2.0, 4.0, 5.0, 6.0, 7.0]

    def test_subsample_excludes_self(self):
        keys = np.arange(8, dtype=float).reshape(8, 1)
        for trial in range(30):
            out = negatives_in_batch(keys, 3, 4, SeededRng(trial))
            vals = out[:, 0].astype(int).tolist()
            assert 3 not in vals and len(set(vals)) == 4

    def test_two_queries_single_other(self):
        keys = np.array([[1.0], [2.0]])
        out = negatives_in_batch(keys, 0, 1, SeededRng(0))
        assert out[:, 0].tolist() == [2.0]

    def test_k_too_large_rejected(self):
        with pytest.raises(ConfigError):
            negatives_in_batch(np.zeros((4, 2)), 0, 4, SeededRng(0))

    def test_shared_index_builder_excludes_self(self):
        for k in (3, 7):
            idx = _inbatch_shared_indices(8, k, SeededRng(2))
            for j in range(8):
                row = idx[j].tolist()
                assert j not in row and len(set(row)) == k

    def test_shared_pool_is_small(self):
        idx = _inbatch_shared_indices(64, 8, SeededRng(2))
        assert len(set(idx.reshape(-1).tolist())) <= 9

    def test_subsample_index_builder(self):
        idx = _subsample_indices(16, 5, SeededRng(3))
        for j in range(16):
            row = idx[j].tolist()
            assert j not in row and len(set(row)) == 5 and all(0 <= v < 16 for v in row)


class TestLrSchedule:
    def test_linear_scaling_values(self):
        assert scaled_lr(0.03, 256, 256) == pytest.approx(0.03)
        assert scaled_lr(0.03, 512, 256) == pytest.approx(0.06)
        assert scaled_lr(0.03, 64, 256) == pytest.approx(0.0075)

    def test_warmup_boundaries(self):
        total, frac, peak = 100, 0.1, 0.5
        assert lr_at_step(0, total, frac, peak) == 0.0
        assert lr_at_step(10, total, frac, peak) == pytest.approx(peak)

    def test_warmup_is_linear(self):
        assert lr_at_step(5, 100, 0.1, 0.5) == pytest.approx(0.25)

    def test_cosine_tail(self):
        total, frac, peak = 100, 0.1, 0.5
        last = lr_at_step(99, total, frac, peak)
        expected = peak * 0.5 * (1 + math.cos(math.pi * 89 / 90))
        assert last == pytest.approx(expected, rel=1e-12)
        assert 0 < last < 0.01 * peak

    def test_monotone_decay_after_warmup(self):
        vals = [lr_at_step(s, 50, 0.2, 1.0) for s in range(10, 50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            lr_at_step(100, 100, 0.1, 0.5)


class TestTrainConfig:
    def test_in_batch_requires_small_k(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss=LossConfig(k=8), n_queries=8, neg_source="batch")

    def test_bank_capacity_validated(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss=LossConfig(k=8), neg_source="bank", bank_capacity=4)

    def test_json_round_trip(self):
        cfg = simo_train_config(n_queries=32, alpha=64.0, epochs=3, seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys_rejected(self):
        doc = simo_train_config().to_dict()
        doc["loss"]["bogus"] = 1
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(doc)

    def test_simo_preset_shape(self):
        cfg = simo_train_config(n_queries=64)
        assert cfg.neg_source == "batch"
        assert cfg.k == 63
        assert cfg.loss.margin_mode == "eqco"
        assert cfg.warmup_frac > 0


class TestTrainLoop:
    def test_smoke_loss_decreases(self):
        ds = small_dataset()
        cfg = tiny_config(epochs=4)
        result = train(cfg, ds)
        assert result.epoch_mean("loss", 3) < result.epoch_mean("loss", 0)

    def test_deterministic_logs(self):
        ds = small_dataset()
        a = train(tiny_config(), ds)
        b = train(tiny_config(), ds)
        assert a.log == b.log

    def test_eqco_alpha_k_equals_fixed_zero_margin_bitwise(self):
        ds = small_dataset()
        cfg_e = tiny_config(loss=LossConfig(k=7, tau=0.2, margin_mode="eqco", alpha=7.0))
        cfg_f = tiny_config(loss=LossConfig(k=7, tau=0.2, margin_mode="fixed", margin=0.0))
        log_e = train(cfg_e, ds).log
        log_f = train(cfg_f, ds).log
        assert log_e == log_f

    def test_bank_bootstrap_skips_first_step(self):
        ds = small_dataset(n=64)
        cfg = tiny_config(neg_source="bank", n_queries=8, epochs=2)
        result = train(cfg, ds)
        assert result.skipped_steps == 1
        assert len(result.log) == result.total_steps - 1

    def test_momentum_params_follow_ema_exactly(self):
        ds = small_dataset(n=64)
        cfg = tiny_config(epochs=1, beta=0.9)
        seen = []

        prev = {}

        def hook(record, params, momentum):
            flat_q = np.concatenate([a.reshape(-1) for a in params.weights + params.biases])
            flat_k = np.concatenate(
                [a.reshape(-1) for a in momentum.params.weights + momentum.params.biases]
            )
            if prev:
                expected = cfg.beta * prev["k"] + (1 - cfg.beta) * flat_q
                seen.append(float(np.max(np.abs(flat_k - expected))))
            prev["k"] = flat_k

        train(cfg, ds, step_hook=hook)
        assert seen and max(seen) < 1e-12

    def test_per_query_negative_count_every_mode(self):
        from eqco import training as T

        counts = []
        orig = T.batch_infonce

        def spy(queries, positives, pool, neg_idx, cfg):
            if neg_idx is None:
                counts.append(pool.shape[0])
            else:
                counts.append(neg_idx.shape[1])
            return orig(queries, positives, pool, neg_idx, cfg)

        ds = small_dataset(n=64)
        T.batch_infonce = spy
        try:
            for source in ("bank", "batch", "subsample"):
                counts.clear()
                train(tiny_config(neg_source=source, epochs=1), ds)
                assert counts and all(c == 7 for c in counts)
        finally:
            T.batch_infonce = orig

    def test_dataset_smaller_than_batch_rejected(self):
        ds = small_dataset(n=4)
        with pytest.raises(ConfigError):
            train(tiny_config(), ds)

    def test_works_with_augmented_vectors_source(self):
        x = SeededRng(10).standard_normal((64, 6))
        result = train(tiny_config(epochs=1), AugmentedVectors(latents=x, aug_noise_std=0.1))
        assert len(result.log) == result.total_steps


class TestLinearProbe:
    def test_separable_two_class_is_perfect(self):
        rng = SeededRng(0)
        x = rng.standard_normal((200, 2)) * 0.1
        x[:100, 0] += 3.0
        x[100:, 0] -= 3.0
        y = np.array([0] * 100 + [1] * 100)
        assert linear_probe(x, y, 0.75, SeededRng(1)) == 1.0

    def test_shuffled_labels_are_chance(self):
        rng = SeededRng(2)
        x = rng.standard_normal((2000, 8))
        y = (rng.uniform(2000) < 0.5).astype(np.int64)
        acc = linear_probe(x, y, 0.5, SeededRng(3))
        # binomial 3 sigma around 0.5 over ~1000 test points
        assert abs(acc - 0.5) < 3 * 0.5 / math.sqrt(1000)

    def test_constant_embeddings_predict_majority(self):
        x = np.ones((100, 4))
        y = np.array([0] * 70 + [1] * 30)
        acc = linear_probe(x, y, 0.5, SeededRng(4))
        y_test = y[SeededRng(4).permutation(100)[50:]]
        assert acc == pytest.approx(float(np.mean(y_test == 0)))

    def test_single_class_train_split_rejected(self):
        x = np.ones((10, 2))
        y = np.zeros(10, dtype=np.int64)
        with pytest.raises(ValueError):
            linear_probe(x, y, 0.5, SeededRng(0))

    def test_trained_encoder_beats_chance(self):
        ds = small_dataset(n=256)
        result = train(tiny_config(n_queries=32, epochs=3), ds)
        emb, _ = encode_batch(result.encoder, ds.latents)
        acc = linear_probe(emb, ds.labels, 0.75, SeededRng(5))
        assert acc > 0.5  # 4 balanced classes, chance 0.25
