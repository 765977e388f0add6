"""Projected-SGD rounding: steering vector, box feasibility, limits, wins."""

import itertools

import numpy as np
import pytest

from discq.discquant import (DiscQuantConfig, NonFiniteObjective, cstar,
                             finalize, init_x, optimize)
from discq.grid import bracket_of, build_block_scaling, explicit_grid, rtn
from discq.toymodel import kl_term, random_model, sample_sequences


class TestCstar:
    def test_formula(self):
        np.testing.assert_allclose(cstar(np.array([0.25, 0.75])), [0.5, -0.5])

    def test_half_gives_zero(self):
        np.testing.assert_array_equal(cstar(np.full(5, 0.5)), np.zeros(5))

    def test_identity_on_all_integral_points(self):
        rng = np.random.default_rng(0)
        y = rng.random(8)
        c = cstar(y)
        ysq = float(y @ y)
        for bits in itertools.product((0.0, 1.0), repeat=8):
            x = np.array(bits)
            lhs = float(c @ x) + ysq
            rhs = float((x - y) @ (x - y))
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_rejects_out_of_box(self):
        with pytest.raises(ValueError):
            cstar(np.array([1.5]))


class TestInitX:
    def test_original_weights_reproduces_w(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal(64)
        br = bracket_of(w, build_block_scaling(w, bits=3, groupsize=16))
        x = init_x("original-weights", br)
        wx = br.w_down * (1 - x) + br.w_up * x
        np.testing.assert_allclose(wx, w, atol=4 * np.spacing(np.abs(w).max()))

    def test_uniform_reproducible_and_centered(self):
        w = np.linspace(-1, 1, 2000)
        br = bracket_of(w, build_block_scaling(w, bits=3, groupsize=16))
        a = init_x("uniform-random", br, seed=5)
        b = init_x("uniform-random", br, seed=5)
        np.testing.assert_array_equal(a, b)
        assert 0.45 <= a.mean() <= 0.55

    def test_unknown_mode(self):
        br = bracket_of(np.zeros(2), explicit_grid([-1.0, 0.0, 1.0], n=2))
        with pytest.raises(ValueError):
            init_x("zeros", br)


class TestFinalize:
    def test_integral_x_exact_selection(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal(32)
        br = bracket_of(w, build_block_scaling(w, bits=3, groupsize=8))
        x = rng.integers(0, 2, 32).astype(float)
        out = finalize(x, br, tau=1e-3)
        np.testing.assert_array_equal(out, np.where(x == 1.0, br.w_up, br.w_down))

    def test_random_x_stays_on_bracket(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal(64)
        br = bracket_of(w, build_block_scaling(w, bits=2, groupsize=16))
        out = finalize(rng.random(64), br, tau=1e-3)
        assert np.all((out == br.w_down) | (out == br.w_up))

    def test_midpoint_tie_follows_grid_rule(self):
        br = bracket_of(np.array([0.45]), explicit_grid([0.3, 0.6], n=1))
        out = finalize(np.array([0.5]), br, tau=1e-3)
        assert out[0] == 0.3  # smaller magnitude


def tiny_cfg(**over):
    base = dict(iterations=60, warmup=10, batch_size=2, seq_length=6)
    base.update(over)
    return DiscQuantConfig(**base)


class TestOptimize:
    def test_report_shape_and_box(self):
        teacher = random_model(seed=10)
        grid = build_block_scaling(teacher.params, bits=3, groupsize=16)
        rep = optimize(teacher, grid, tiny_cfg(seed=1))
        assert rep.trace_kl.shape == (60,)
        assert np.all(rep.x >= 0) and np.all(rep.x <= 1)
        br = bracket_of(teacher.params, grid)
        assert np.all((rep.quantized == br.w_down) | (rep.quantized == br.w_up))

    def test_huge_lambda_on_linear_recovers_rtn_exactly(self):
        teacher = random_model(seed=11)
        grid = build_block_scaling(teacher.params, bits=2, groupsize=16)
        cfg = DiscQuantConfig(lam=2e8, lambda_on="linear", iterations=300,
                              warmup=30, batch_size=2, seed=2)
        rep = optimize(teacher, grid, cfg)
        np.testing.assert_array_equal(rep.quantized, rtn(teacher.params, grid))

    def test_lambda_zero_on_fine_grid_sane(self):
        teacher = random_model(seed=12)
        grid = build_block_scaling(teacher.params, bits=8, groupsize=16)
        heldout = sample_sequences(teacher, 64, seed=99)
        rep = optimize(teacher, grid, tiny_cfg(lam=0.0, seed=3,
                                               init="original-weights"),
                       heldout=heldout)
        kl_base, _ = kl_term(teacher, teacher.with_params(rtn(teacher.params, grid)),
                             heldout)
        assert rep.heldout_kl <= 2 * kl_base + 1e-9

    def test_integrality_pressure(self):
        teacher = random_model(seed=13)
        grid = build_block_scaling(teacher.params, bits=2, groupsize=16)
        rep = optimize(teacher, grid, DiscQuantConfig(iterations=256, warmup=32,
                                                      batch_size=2, seed=4))
        frac_at_warmup = rep.trace_fractional[31]
        assert rep.trace_fractional[-1] <= frac_at_warmup

    def test_smoothed_objective_decreases(self):
        medians = []
        for seed in range(8):
            teacher = random_model(seed=40 + seed)
            grid = build_block_scaling(teacher.params, bits=3, groupsize=16)
            rep = optimize(teacher, grid, DiscQuantConfig(iterations=256, warmup=32,
                                                          batch_size=2, seed=seed))
            total = rep.trace_linear + rep.trace_kl
            ema = total[0]
            ema_trace = []
            for v in total:
                ema = 0.99 * ema + 0.01 * v
                ema_trace.append(ema)
            medians.append(ema_trace[-1] - ema_trace[31])
        assert np.median(medians) <= 0

    def test_beats_rtn_on_median_heldout_kl(self):
        gaps = []
        for seed in range(8):
            teacher = random_model(seed=seed)
            heldout = sample_sequences(teacher, 128, seed=seed + 1000)
            grid = build_block_scaling(teacher.params, bits=2, groupsize=16)
            kl_rtn, _ = kl_term(teacher, teacher.with_params(rtn(teacher.params, grid)),
                                heldout)
            rep = optimize(teacher, grid, DiscQuantConfig(seed=seed), heldout=heldout)
            gaps.append(rep.heldout_kl - kl_rtn)
        assert np.median(gaps) < 0

    def test_determinism(self):
        teacher = random_model(seed=14)
        grid = build_block_scaling(teacher.params, bits=3, groupsize=16)
        a = optimize(teacher, grid, tiny_cfg(seed=5))
        b = optimize(teacher, grid, tiny_cfg(seed=5))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.quantized, b.quantized)

    def test_exhausted_stream_rejected(self):
        teacher = random_model(seed=15)
        grid = build_block_scaling(teacher.params, bits=3, groupsize=16)
        stream = [sample_sequences(teacher, 2, seed=0)] * 3  # shorter than iterations
        with pytest.raises(ValueError, match="exhausted"):
            optimize(teacher, grid, tiny_cfg(seed=6), data_stream=stream)

    def test_grid_size_mismatch_rejected(self):
        teacher = random_model(seed=16)
        grid = build_block_scaling(np.zeros(10), bits=3, groupsize=5)
        with pytest.raises(ValueError):
            optimize(teacher, grid, tiny_cfg())

    def test_nonfinite_abort_carries_trace(self):
        teacher = random_model(seed=17)
        grid = build_block_scaling(teacher.params, bits=3, groupsize=16)
        bad = teacher.params.copy()
        with pytest.raises((NonFiniteObjective, FloatingPointError)), \
                np.errstate(all="ignore"):
            # an exploding teacher makes the KL ingredients overflow
            optimize(teacher.with_params(bad * 1e200), grid, tiny_cfg(seed=7))


class TestConfigValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            DiscQuantConfig(lam=-1)
        with pytest.raises(ValueError):
            DiscQuantConfig(warmup=2000, iterations=100)
        with pytest.raises(ValueError):
            DiscQuantConfig(tau=0.5)
        with pytest.raises(ValueError):
            DiscQuantConfig(lambda_on="both")
        with pytest.raises(ValueError):
            DiscQuantConfig(init="midpoint")
