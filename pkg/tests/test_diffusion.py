import math

import numpy as np
import pytest
import torch

from storydiff.diffusion import (CLEAN, add_noise, ddim_step, ddim_timesteps,
                                 make_schedule, training_loss)


class TestMakeSchedule:
    def test_three_step_cumulative_product(self):
        sched = make_schedule(3, 0.1, 0.3)
        assert np.allclose(sched.betas, [0.1, 0.2, 0.3])
        # hand cumulative product: 0.9, 0.9*0.8, 0.9*0.8*0.7
        assert np.allclose(sched.alpha_bars, [0.9, 0.72, 0.504], atol=1e-12)

    def test_single_step(self):
        sched = make_schedule(1, 0.1, 0.1)
        assert np.allclose(sched.alpha_bars, [0.9])

    @pytest.mark.parametrize("T,b0,b1", [(10, 1e-4, 0.02), (1000, 1e-4, 0.02),
                                         (5, 0.3, 0.6)])
    def test_alpha_bars_strictly_decreasing(self, T, b0, b1):
        sched = make_schedule(T, b0, b1)
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_recurrence_invariant(self):
        sched = make_schedule(500)
        lhs = sched.alpha_bars[1:]
        rhs = sched.alpha_bars[:-1] * sched.alphas[1:]
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    @pytest.mark.parametrize("kwargs", [
        dict(T=0), dict(T=5, beta_start=0.0), dict(T=5, beta_end=1.0),
        dict(T=5, beta_start=0.5, beta_end=0.2), dict(T=5, kind="cosine"),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            make_schedule(**{"T": 10, **kwargs})

    def test_alpha_bar_clean_sentinel(self):
        sched = make_schedule(10)
        assert sched.alpha_bar(CLEAN) == 1.0
        with pytest.raises(ValueError):
            sched.alpha_bar(10)


class TestAddNoise:
    def test_near_unity_alpha_bar_returns_x0(self):
        sched = make_schedule(1, 1e-12, 1e-12)
        x0 = torch.randn(3, 4, 4, dtype=torch.float64)
        out = add_noise(x0, torch.randn_like(x0), 0, sched)
        assert torch.allclose(out, x0, atol=1e-5)

    def test_vanishing_alpha_bar_returns_noise(self):
        sched = make_schedule(2000, 1e-4, 0.02)
        x0 = torch.randn(3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(x0)
        out = add_noise(x0, eps, 1999, sched)
        assert torch.allclose(out, eps, atol=1e-3)

    def test_scalar_case(self):
        sched = make_schedule(3, 0.1, 0.3)
        x0 = torch.tensor([1.0], dtype=torch.float64)
        out = add_noise(x0, torch.zeros_like(x0), 1, sched)
        assert out.item() == pytest.approx(math.sqrt(0.72), abs=1e-12)

    def test_per_sample_timesteps(self):
        sched = make_schedule(10)
        x0 = torch.randn(4, 3, 2, 2)
        eps = torch.randn_like(x0)
        batched = add_noise(x0, eps, torch.tensor([0, 3, 5, 9]), sched)
        for i, t in enumerate([0, 3, 5, 9]):
            single = add_noise(x0[i], eps[i], t, sched)
            assert torch.equal(batched[i], single)

    def test_errors(self):
        sched = make_schedule(10)
        x = torch.zeros(3, 2, 2)
        with pytest.raises(ValueError):
            add_noise(x, torch.zeros(3, 2, 3), 0, sched)
        with pytest.raises(ValueError):
            add_noise(x, x, 10, sched)


class TestDdimStep:
    def test_oracle_noise_inverts_add_noise(self):
        sched = make_schedule(100)
        x0 = torch.randn(3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(x0)
        x_t = add_noise(x0, eps, 60, sched)
        rec = ddim_step(x_t, eps, 60, CLEAN, sched)
        assert torch.allclose(rec, x0, atol=1e-5)

    def test_zero_noise_prediction_rescales(self):
        sched = make_schedule(100)
        x_t = torch.randn(3, 4, 4, dtype=torch.float64)
        out = ddim_step(x_t, torch.zeros_like(x_t), 50, 20, sched)
        factor = math.sqrt(sched.alpha_bar(20) / sched.alpha_bar(50))
        assert torch.allclose(out, factor * x_t, atol=1e-12)

    def test_scalar_case_against_direct_evaluation(self):
        # direct evaluation of the two update formulas at abar_t=0.72,
        # abar_prev=0.9 (the schedule [0.1, 0.2, 0.3])
        sched = make_schedule(3, 0.1, 0.3)
        x_t = torch.tensor([0.9], dtype=torch.float64)
        eps = torch.tensor([0.1], dtype=torch.float64)
        xhat0 = (0.9 - math.sqrt(1 - 0.72) * 0.1) / math.sqrt(0.72)
        expected = math.sqrt(0.9) * xhat0 + math.sqrt(1 - 0.9) * 0.1
        assert xhat0 == pytest.approx(0.99830, abs=5e-6)
        assert expected == pytest.approx(0.97869, abs=5e-6)
        out = ddim_step(x_t, eps, 1, 0, sched)
        assert out.item() == pytest.approx(expected, abs=1e-12)

    def test_deterministic(self):
        sched = make_schedule(100)
        x_t = torch.randn(3, 4, 4)
        eps = torch.randn_like(x_t)
        assert torch.equal(ddim_step(x_t, eps, 40, 10, sched),
                           ddim_step(x_t, eps, 40, 10, sched))

    def test_rejects_bad_timesteps(self):
        sched = make_schedule(100)
        x = torch.zeros(3, 2, 2)
        with pytest.raises(ValueError):
            ddim_step(x, x, 10, 10, sched)
        with pytest.raises(ValueError):
            ddim_step(x, x, 10, 20, sched)


class TestMarginalComposition:
    def test_iterated_transitions_match_closed_form(self):
        # the single-step chain is the independent oracle for add_noise
        sched = make_schedule(50, 1e-4, 0.02)
        n = 8000
        x0 = 0.7
        rng = np.random.default_rng(42)
        x = np.full(n, x0)
        for t in range(50):
            beta = sched.betas[t]
            x = math.sqrt(1 - beta) * x + math.sqrt(beta) * rng.standard_normal(n)
            if t in (10, 25, 49):
                ab = sched.alpha_bar(t)
                se_mean = math.sqrt((1 - ab) / n)
                se_var = (1 - ab) * math.sqrt(2 / (n - 1))
                assert abs(x.mean() - math.sqrt(ab) * x0) <= 3 * se_mean
                assert abs(x.var(ddof=1) - (1 - ab)) <= 3 * se_var


class TestDdimTimesteps:
    def test_standard_grid(self):
        ts = ddim_timesteps(1000, 40)
        assert len(ts) == 40 and ts[0] == 999 and ts[-1] == 0
        assert all(b < a for a, b in zip(ts, ts[1:]))

    def test_full_grid(self):
        assert ddim_timesteps(10, 10) == list(range(9, -1, -1))

    def test_single(self):
        assert ddim_timesteps(1000, 1) == [999]

    def test_rejects_too_many(self):
        with pytest.raises(ValueError):
            ddim_timesteps(10, 11)


class TestTrainingLoss:
    def test_perfect_prediction(self):
        x = torch.randn(3, 4, 4)
        assert training_loss(x, x).item() == 0.0

    def test_unit_error(self):
        assert training_loss(torch.ones(2, 3), torch.zeros(2, 3)).item() == 1.0

    def test_mean_reduction(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([0.0, 0.0])
        assert training_loss(a, b).item() == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            training_loss(torch.zeros(2), torch.zeros(3))
