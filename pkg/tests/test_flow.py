import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hazeflow.errors import TrainingDivergenceError, ValidationError
from hazeflow.flow import (TrainConfig, guided_cfm_loss, interpolate,
                           make_flow_batch, sample_time,
                           sample_time_continuous, sifm_base_sample,
                           target_velocity, training_step)
from hazeflow.net import TINY_ARCH, init_params


class TestSampleTime:
    def test_two_point_grid(self, rng):
        values = {sample_time(1, rng) for _ in range(100)}
        assert values <= {0.0, 1.0}
        assert len(values) == 2

    def test_t20_grid(self, rng):
        grid = {i / 20 for i in range(21)}
        for _ in range(500):
            assert sample_time(20, rng) in grid

    def test_frequencies_uniform(self):
        # Frequency-count oracle over the 5-point grid of steps_t=4.
        rng = np.random.default_rng(0)
        draws = sample_time(4, rng, size=100_000)
        for point in (0.0, 0.25, 0.5, 0.75, 1.0):
            freq = np.mean(draws == point)
            assert abs(freq - 0.2) <= 0.01

    @given(steps=st.integers(min_value=1, max_value=50),
           seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_never_off_grid(self, steps, seed):
        rng = np.random.default_rng(seed)
        t = sample_time(steps, rng)
        assert t in {i / steps for i in range(steps + 1)}

    def test_continuous_mode_in_unit_interval(self, rng):
        draws = sample_time_continuous(20, rng, size=1000)
        assert draws.min() >= 0.0 and draws.max() <= 1.0

    def test_invalid_steps(self, rng):
        with pytest.raises(ValidationError):
            sample_time(0, rng)


class TestInterpolate:
    def test_boundaries_exact(self, rng):
        x0 = rng.standard_normal((8, 8)).astype(np.float32)
        x1 = rng.standard_normal((8, 8)).astype(np.float32)
        assert np.array_equal(interpolate(x0, x1, 0.0), x0)
        assert np.array_equal(interpolate(x0, x1, 1.0), x1)

    def test_linear_arithmetic(self):
        x0 = np.array([[0.0, 2.0]])
        x1 = np.array([[4.0, 6.0]])
        assert np.allclose(interpolate(x0, x1, 0.25), [[1.0, 3.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            interpolate(np.zeros((2, 2)), np.zeros((3, 3)), 0.5)

    def test_t_out_of_range(self):
        with pytest.raises(ValidationError):
            interpolate(np.zeros((2, 2)), np.zeros((2, 2)), 1.5)

    def test_finite_difference_matches_velocity(self, rng):
        # Difference-quotient oracle on unit-scale data.
        x0 = rng.standard_normal((16, 16))
        x1 = rng.standard_normal((16, 16))
        delta = 1e-3
        for t in (0.0, 0.3, 0.7, 1.0 - delta):
            quotient = (interpolate(x0, x1, t + delta) - interpolate(x0, x1, t)) / delta
            assert np.allclose(quotient, target_velocity(x0, x1), atol=1e-6)

    @given(t=st.floats(min_value=0.0, max_value=1.0),
           seed=st.integers(min_value=0, max_value=2**16))
    @settings(max_examples=40, deadline=None)
    def test_interpolant_between_endpoints_property(self, t, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((4, 4))
        x1 = rng.standard_normal((4, 4))
        x_t = interpolate(x0, x1, t)
        assert np.allclose(x_t, (1 - t) * x0 + t * x1)


class TestTargetVelocity:
    def test_stationary_path(self, rng):
        x = rng.standard_normal((4, 4))
        assert np.array_equal(target_velocity(x, x), np.zeros((4, 4)))

    def test_unit_step(self):
        v = target_velocity(np.zeros((3, 3)), np.ones((3, 3)))
        assert np.array_equal(v, np.ones((3, 3)))


class TestGuidedLoss:
    def test_zero_iff_equal(self, rng):
        x = rng.standard_normal((5, 5))
        assert guided_cfm_loss(x, x) == 0.0

    def test_constant_offset(self, rng):
        x = rng.standard_normal((5, 5))
        assert float(guided_cfm_loss(x + 1.0, x)) == pytest.approx(1.0)

    def test_matches_scalar_loop_oracle(self, rng):
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        total = 0.0
        for i in range(3):
            for j in range(3):
                total += (a[i, j] - b[i, j]) ** 2
        assert float(guided_cfm_loss(a, b)) == pytest.approx(total / 9, abs=1e-7)

    def test_non_negative(self, rng):
        a = rng.standard_normal((6, 6))
        b = rng.standard_normal((6, 6))
        assert float(guided_cfm_loss(a, b)) > 0


class TestMarginalPath:
    def test_std_matches_one_minus_t(self):
        # Eq.-level property: per-pixel std of x_t over draws is (1 - t).
        rng = np.random.default_rng(4)
        x1 = rng.standard_normal((8, 8))
        for t in (0.1, 0.5, 0.9):
            draws = np.stack([
                interpolate(rng.standard_normal((8, 8)), x1, t)
                for _ in range(10_000)
            ])
            std = draws.std(axis=0).mean()
            assert abs(std - (1 - t)) / (1 - t) < 0.03
            mean_err = np.abs(draws.mean(axis=0) - t * x1).max()
            assert mean_err < 0.1


class TestSifmBaseSample:
    def test_sigma_zero_returns_degradation(self, rng):
        x1 = rng.standard_normal((8, 8)).astype(np.float32)
        deg = rng.standard_normal((8, 8)).astype(np.float32)
        out = sifm_base_sample(x1, deg, 0.0, rng)
        assert np.array_equal(out, deg)
        assert out is not deg

    def test_mean_and_std_oracles(self):
        rng = np.random.default_rng(8)
        x1 = np.zeros((4, 4), np.float32)
        deg = np.full((4, 4), 2.5, np.float32)
        sigma = 0.7
        draws = np.stack([sifm_base_sample(x1, deg, sigma, rng)
                          for _ in range(10_000)])
        se = sigma / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - 2.5) <= 3 * se)
        assert np.allclose(draws.std(axis=0), sigma, rtol=0.05)

    def test_negative_sigma_rejected(self, rng):
        with pytest.raises(ValidationError):
            sifm_base_sample(np.zeros((2, 2)), np.zeros((2, 2)), -0.1, rng)


def tiny_stacks(n=8, size=16, seed=0):
    rng = np.random.default_rng(seed)
    hazy = rng.standard_normal((n, size, size)).astype(np.float32)
    clean = rng.standard_normal((n, size, size)).astype(np.float32)
    return hazy, clean


def tiny_cfg(**kw):
    base = dict(steps_t=20, batch_size=4, learning_rate=1e-3, patch_size=16,
                max_iterations=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestFlowBatch:
    def test_batch_invariants(self):
        hazy, clean = tiny_stacks()
        batch = make_flow_batch(hazy, clean, np.random.default_rng(1), tiny_cfg())
        t = batch.t.view(-1, 1, 1, 1)
        assert torch.allclose(batch.x_t, (1 - t) * batch.x0 + t * batch.x1)
        assert torch.equal(batch.v_target, batch.x1 - batch.x0)
        scaled = batch.t * 20  # grid values, up to float32 rounding
        assert torch.allclose(scaled, torch.round(scaled), atol=1e-4)

    def test_sifm_coupling_base(self):
        hazy, clean = tiny_stacks()
        cfg = tiny_cfg(coupling="sifm", sifm_sigma=0.0)
        batch = make_flow_batch(hazy, clean, np.random.default_rng(1), cfg)
        assert torch.equal(batch.x0, batch.x_cond)

    def test_patch_cropping(self):
        hazy, clean = tiny_stacks(size=32)
        cfg = tiny_cfg(patch_size=16)
        batch = make_flow_batch(hazy, clean, np.random.default_rng(1), cfg)
        assert batch.x_t.shape == (4, 1, 16, 16)

    def test_patch_too_large(self):
        hazy, clean = tiny_stacks(size=8)
        with pytest.raises(ValidationError):
            make_flow_batch(hazy, clean, np.random.default_rng(1), tiny_cfg())


class TestTrainingStep:
    def setup_method(self):
        torch.manual_seed(0)

    def test_deterministic(self):
        hazy, clean = tiny_stacks()
        cfg = tiny_cfg()
        losses = []
        for _ in range(2):
            field = init_params(TINY_ARCH, seed=5)
            opt = torch.optim.Adam(field.parameters(), lr=cfg.learning_rate)
            batch = make_flow_batch(hazy, clean, np.random.default_rng(2), cfg)
            losses.append(training_step(field, opt, batch))
        assert losses[0] == losses[1]

    def test_zero_lr_leaves_params_bitwise(self):
        hazy, clean = tiny_stacks()
        field = init_params(TINY_ARCH, seed=5)
        before = {k: v.clone() for k, v in field.state_dict().items()}
        opt = torch.optim.Adam(field.parameters(), lr=0.0)
        batch = make_flow_batch(hazy, clean, np.random.default_rng(2), tiny_cfg())
        training_step(field, opt, batch)
        for k, v in field.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_loss_decreases_on_frozen_batch(self):
        # Empirical descent check: 200 steps on one fixed batch.
        hazy, clean = tiny_stacks()
        field = init_params(TINY_ARCH, seed=5)
        opt = torch.optim.Adam(field.parameters(), lr=1e-3)
        batch = make_flow_batch(hazy, clean, np.random.default_rng(2), tiny_cfg())
        first = training_step(field, opt, batch)
        last = first
        for _ in range(199):
            last = training_step(field, opt, batch)
        assert last < first

    def test_divergence_raises(self):
        hazy, clean = tiny_stacks()
        field = init_params(TINY_ARCH, seed=5)
        with torch.no_grad():
            for p in field.parameters():
                p.mul_(np.inf)
        opt = torch.optim.Adam(field.parameters(), lr=1e-3)
        batch = make_flow_batch(hazy, clean, np.random.default_rng(2), tiny_cfg())
        with pytest.raises(TrainingDivergenceError):
            training_step(field, opt, batch)
