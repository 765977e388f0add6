"""Toy model forward/gradient correctness against independent oracles."""

import numpy as np
import pytest

from discq.grid import build_block_scaling, explicit_grid, rtn
from discq.toymodel import (SampleBatch, ToyArch, ToyModel, ce_loss_rows,
                            first_order_study, forward_next_token, grad_stats,
                            gradient_rows, hessian_quadratic_form, kl_term,
                            load_checkpoint, mean_ce_grad, model_from_record,
                            model_to_record, per_sample_grad, random_model,
                            sample_sequences, save_checkpoint,
                            train_to_convergence)

from oracles import central_diff, direct_kl


def probe_indices(rng, n, count=32):
    return rng.choice(n, size=min(count, n), replace=False)


class TestForward:
    def test_zero_params_uniform(self):
        arch = ToyArch()
        model = ToyModel(arch, np.zeros(arch.n_params))
        p = forward_next_token(model, [3, 1])
        np.testing.assert_allclose(p, np.full(arch.vocab, 1 / arch.vocab), atol=1e-12)

    def test_normalization_and_positivity(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            model = random_model(seed=seed, scale=3.0)
            prefix = rng.integers(0, 16, size=rng.integers(0, 5))
            p = forward_next_token(model, prefix)
            assert abs(p.sum() - 1.0) < 1e-9
            assert np.all(p > 0)

    def test_determinism(self):
        a = forward_next_token(random_model(seed=7), [2, 9, 4])
        b = forward_next_token(random_model(seed=7), [2, 9, 4])
        np.testing.assert_array_equal(a, b)

    def test_token_out_of_range(self):
        model = random_model(seed=1)
        with pytest.raises(ValueError):
            forward_next_token(model, [16])
        with pytest.raises(ValueError):
            forward_next_token(model, [-1])

    def test_prefix_too_long(self):
        model = random_model(seed=1)
        with pytest.raises(ValueError):
            forward_next_token(model, [1, 2, 3, 4, 5])

    def test_two_layer_arch(self):
        arch = ToyArch(layers=2)
        model = random_model(arch, seed=3)
        p = forward_next_token(model, [0, 1, 2, 3])
        assert abs(p.sum() - 1.0) < 1e-9


class TestGradients:
    def test_per_sample_grad_vs_finite_differences(self):
        model = random_model(seed=11)
        sample = ([5, 2, 9], 4)
        grad = per_sample_grad(model, sample)
        rng = np.random.default_rng(0)
        idx = probe_indices(rng, model.arch.n_params)

        def loss(params):
            probs = forward_next_token(model.with_params(params), sample[0])
            return -np.log(probs[sample[1]])

        fd = central_diff(loss, model.params, idx)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(grad[idx] - fd) / scale) < 1e-4

    def test_two_layer_grad_vs_finite_differences(self):
        model = random_model(ToyArch(layers=2), seed=13)
        sample = ([1, 15, 0, 7], 2)
        grad = per_sample_grad(model, sample)
        rng = np.random.default_rng(1)
        idx = probe_indices(rng, model.arch.n_params)

        def loss(params):
            probs = forward_next_token(model.with_params(params), sample[0])
            return -np.log(probs[sample[1]])

        fd = central_diff(loss, model.params, idx)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(grad[idx] - fd) / scale) < 1e-4

    def test_batch_mean_equals_mean_of_rows(self):
        model = random_model(seed=5)
        batch = sample_sequences(model, 6, seed=2)
        _, mean_grad = mean_ce_grad(model, batch)
        rows = gradient_rows(model, batch)
        np.testing.assert_allclose(mean_grad, rows.mean(axis=0), rtol=1e-10, atol=1e-14)

    def test_gradient_near_minimum_coordinate(self):
        # after training to a plateau the full-batch gradient is tiny everywhere
        model = random_model(seed=8)
        batch = sample_sequences(model, 16, seed=8)
        trained = train_to_convergence(model, batch, max_steps=400, lr=0.05)
        _, g = mean_ce_grad(trained, batch)
        assert np.linalg.norm(g) < np.linalg.norm(mean_ce_grad(model, batch)[1])


class TestKL:
    def test_identical_models_zero(self):
        teacher = random_model(seed=21)
        batch = sample_sequences(teacher, 8, seed=3)
        value, grad = kl_term(teacher, teacher, batch)
        assert value == 0.0
        assert np.max(np.abs(grad)) <= 1e-9

    def test_perturbed_student_positive(self):
        teacher = random_model(seed=22)
        batch = sample_sequences(teacher, 8, seed=4)
        bumped = teacher.params.copy()
        bumped[100] += 0.05
        value, _ = kl_term(teacher, teacher.with_params(bumped), batch)
        assert value > 0

    def test_matches_direct_summation(self):
        teacher = random_model(seed=23)
        student = random_model(seed=24)
        seqs = sample_sequences(teacher, 5, length=6, seed=5)
        value, _ = kl_term(teacher, student, seqs)
        total, count = 0.0, 0
        for s in range(5):
            for i in range(6):
                prefix = seqs.sequences[s, max(0, i - 4):i]
                pt = forward_next_token(teacher, prefix)
                ps = forward_next_token(student, prefix)
                total += direct_kl(pt, ps)
                count += 1
        assert value == pytest.approx(total / count, rel=1e-10)

    def test_gradient_vs_finite_differences(self):
        teacher = random_model(seed=25)
        student = random_model(seed=26)
        batch = sample_sequences(teacher, 4, seed=6)
        _, grad = kl_term(teacher, student, batch)
        rng = np.random.default_rng(2)
        idx = probe_indices(rng, teacher.arch.n_params)

        def f(params):
            return kl_term(teacher, student.with_params(params), batch)[0]

        fd = central_diff(f, student.params, idx)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(grad[idx] - fd) / scale) < 1e-4

    def test_arch_mismatch(self):
        with pytest.raises(ValueError):
            kl_term(random_model(seed=1), random_model(ToyArch(hidden=16), seed=1),
                    SampleBatch(np.zeros((1, 4), dtype=int)))


class TestHessianQuadraticForm:
    def test_zero_direction(self):
        teacher = random_model(seed=31)
        batch = sample_sequences(teacher, 4, seed=7)
        assert hessian_quadratic_form(teacher, batch, np.zeros(teacher.arch.n_params)) == 0.0

    def test_nonnegative(self):
        teacher = random_model(seed=32)
        batch = sample_sequences(teacher, 4, seed=8)
        rng = np.random.default_rng(3)
        for _ in range(5):
            d = rng.standard_normal(teacher.arch.n_params)
            assert hessian_quadratic_form(teacher, batch, d) >= 0

    def test_matches_kl_curvature(self):
        teacher = random_model(seed=33)
        batch = sample_sequences(teacher, 6, seed=9)
        rng = np.random.default_rng(4)
        eps = 1e-3
        for _ in range(4):
            d = rng.standard_normal(teacher.arch.n_params)
            d /= np.linalg.norm(d)
            kl, _ = kl_term(teacher, teacher.with_params(teacher.params + eps * d), batch)
            quad = hessian_quadratic_form(teacher, batch, d)
            assert 2 * kl / eps ** 2 == pytest.approx(quad, rel=0.05)


class TestGradStats:
    def test_single_sample_equality(self):
        model = random_model(seed=41)
        batch = SampleBatch(sample_sequences(model, 1, length=1, seed=1).sequences)
        rec = grad_stats(model, batch)
        assert rec.sq_norm_of_mean == pytest.approx(rec.mean_sq_norm, rel=1e-12)

    def test_duplicated_batch_identical_stats(self):
        model = random_model(seed=42)
        seqs = sample_sequences(model, 4, seed=2).sequences
        rec1 = grad_stats(model, SampleBatch(seqs))
        rec2 = grad_stats(model, SampleBatch(np.vstack([seqs, seqs])))
        assert rec1.sq_norm_of_mean == pytest.approx(rec2.sq_norm_of_mean, rel=1e-12)
        assert rec1.mean_sq_norm == pytest.approx(rec2.mean_sq_norm, rel=1e-12)

    def test_converged_model_has_small_mean_gradient(self):
        # self-generated corpus: training to a plateau shrinks the mean
        # gradient while per-sample gradients stay finite
        teacher = random_model(seed=43, scale=1.5)
        corpus = sample_sequences(teacher, 64, seed=3)
        trained = train_to_convergence(teacher, corpus, max_steps=600, lr=0.05)
        rec = grad_stats(trained, corpus)
        assert rec.sq_norm_of_mean / rec.mean_sq_norm < 0.1


class TestFirstOrderStudy:
    def test_identity_rounding_gives_zero_pairs(self):
        model = random_model(seed=51)
        grid = build_block_scaling(model.params, bits=4, groupsize=16)
        batch = sample_sequences(model, 4, seed=4)
        pairs = first_order_study(model, grid, model.params, batch)
        np.testing.assert_array_equal(pairs, 0.0)

    def test_one_pair_per_sample_row(self):
        model = random_model(seed=52)
        grid = build_block_scaling(model.params, bits=3, groupsize=16)
        batch = sample_sequences(model, 3, length=5, seed=5)
        pairs = first_order_study(model, grid, rtn(model.params, grid), batch)
        assert pairs.shape == (15, 2)
        assert np.all(np.isfinite(pairs))

    def test_correlation_improves_with_finer_grid(self):
        corr = {}
        for spacing in (0.2, 0.1, 0.05):
            cors = []
            for seed in range(8):
                model = random_model(seed=60 + seed)
                w = model.params
                lo = int(np.floor(w.min() / spacing)) - 1
                hi = int(np.ceil(w.max() / spacing)) + 1
                grid = explicit_grid(np.arange(lo, hi + 1) * spacing, n=w.shape[0])
                batch = sample_sequences(model, 12, seed=seed)
                pairs = first_order_study(model, grid, rtn(w, grid), batch)
                cors.append(np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1])
            corr[spacing] = float(np.median(cors))
        assert corr[0.05] >= corr[0.1] >= corr[0.2] - 0.02

    def test_rounding_outside_bracket_rejected(self):
        model = random_model(seed=53)
        grid = build_block_scaling(model.params, bits=4, groupsize=16)
        bad = model.params + 10.0
        with pytest.raises(ValueError):
            first_order_study(model, grid, bad, sample_sequences(model, 2, seed=6))


class TestBatchesAndCheckpoints:
    def test_sample_batch_validation(self):
        with pytest.raises(ValueError):
            SampleBatch(np.zeros((0, 4), dtype=int))
        arch = ToyArch()
        batch = SampleBatch(np.array([[0, 17, 1, 2]]))
        with pytest.raises(ValueError):
            batch.rows(arch)

    def test_position_subsets(self):
        arch = ToyArch()
        seqs = np.array([[1, 2, 3, 4, 5, 6], [6, 5, 4, 3, 2, 1]])
        batch = SampleBatch(seqs, positions=((0, 5), (2,)))
        prefixes, targets = batch.rows(arch)
        assert prefixes.shape == (3, arch.context)
        np.testing.assert_array_equal(targets, [1, 6, 4])
        # position 5 with context 4 uses the trailing window
        np.testing.assert_array_equal(prefixes[1], [2, 3, 4, 5])
        # position 0 is fully padded
        assert np.all(prefixes[0] == arch.pad_id)

    def test_sampling_determinism(self):
        model = random_model(seed=70)
        a = sample_sequences(model, 5, seed=9).sequences
        b = sample_sequences(model, 5, seed=9).sequences
        np.testing.assert_array_equal(a, b)
        c = sample_sequences(model, 5, seed=10).sequences
        assert not np.array_equal(a, c)

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        model = random_model(ToyArch(layers=2), seed=71)
        path = tmp_path / "model.json"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.arch == model.arch
        np.testing.assert_array_equal(back.params, model.params)

    def test_record_roundtrip(self):
        model = random_model(seed=72)
        back = model_from_record(model_to_record(model))
        np.testing.assert_array_equal(back.params, model.params)

    def test_ce_rows_finite(self):
        model = random_model(seed=73)
        batch = sample_sequences(model, 4, seed=11)
        rows = ce_loss_rows(model, batch)
        assert rows.shape == (4 * 8,)
        assert np.all(np.isfinite(rows)) and np.all(rows > 0)
