import math

import numpy as np
import pytest
import torch

from trajrecover.diffusion import (
    LazyNoiseChain,
    NoiseSchedule,
    build_noise_chain,
    compose_noise,
    ddim_step,
    ddpm_step,
    forward_jump,
    forward_step,
    make_schedule,
    make_step_schedule,
    posterior_std,
    predict_x0,
)

N_MC = 100_000


def exact_eps(x, x0, t, sched):
    ab = sched.alpha_bar[t]
    return (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


class TestSchedule:
    def test_hand_product(self):
        s = make_schedule(2, 0.1, 0.1)
        np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81], rtol=1e-12)

    def test_long_schedule_regression(self):
        s = make_schedule(1000, 1e-4, 0.02)
        # running product evaluated independently in pure Python
        assert s.alpha_bar[-1] < 5e-3
        assert s.alpha_bar[-1] == pytest.approx(4.0358297653756754e-05, rel=1e-9)

    @pytest.mark.parametrize("T,b0,b1", [(2, 1e-4, 1e-4), (50, 1e-3, 0.05), (500, 1e-4, 0.02), (7, 0.3, 0.9)])
    def test_invariants(self, T, b0, b1):
        s = make_schedule(T, b0, b1)
        assert np.all((s.beta > 0) & (s.beta < 1))
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all(np.isfinite(s.alpha_bar))
        np.testing.assert_allclose(s.alpha_bar, np.cumprod(1 - s.beta), rtol=1e-12)

    @pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.05, 0.01), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_schedule(*args)

    def test_dict_round_trip(self):
        s = make_schedule(123, 2e-4, 0.03)
        assert NoiseSchedule.from_dict(s.to_dict()) == s


class TestForward:
    sched = make_schedule(100, 1e-4, 0.02)

    def test_zero_noise(self):
        x = np.array([0.3, -0.7])
        np.testing.assert_allclose(forward_step(x, 10, np.zeros(2), self.sched),
                                   math.sqrt(self.sched.alpha[10]) * x)

    def test_zero_signal(self):
        eps = np.array([1.5, -2.0])
        np.testing.assert_allclose(forward_step(np.zeros(2), 10, eps, self.sched),
                                   math.sqrt(self.sched.beta[10]) * eps)

    def test_range(self):
        with pytest.raises(IndexError):
            forward_step(np.zeros(2), 100, np.zeros(2), self.sched)
        with pytest.raises(IndexError):
            forward_jump(np.zeros(2), -1, np.zeros(2), self.sched)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_step(np.zeros(2), 0, np.zeros(3), self.sched)

    def test_monte_carlo_step(self):
        t, x = 40, 0.6
        rng = np.random.default_rng(0)
        out = forward_step(np.full(N_MC, x), t, rng.standard_normal(N_MC), self.sched)
        b = self.sched.beta[t]
        assert abs(out.mean() - math.sqrt(self.sched.alpha[t]) * x) < 3 * math.sqrt(b / N_MC)
        assert abs(out.var(ddof=1) - b) < 3 * b * math.sqrt(2 / (N_MC - 1))

    def test_monte_carlo_jump(self):
        t, x = 70, -0.4
        rng = np.random.default_rng(1)
        out = forward_jump(np.full(N_MC, x), t, rng.standard_normal(N_MC), self.sched)
        ab = self.sched.alpha_bar[t]
        assert abs(out.mean() - math.sqrt(ab) * x) < 3 * math.sqrt((1 - ab) / N_MC)
        assert abs(out.var(ddof=1) - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2 / (N_MC - 1))

    def test_first_step_matches_jump(self):
        rng = np.random.default_rng(2)
        x0, eps = rng.standard_normal(5), rng.standard_normal(5)
        np.testing.assert_allclose(forward_jump(x0, 0, eps, self.sched), forward_step(x0, 0, eps, self.sched), rtol=0, atol=1e-15)

    def test_zero_multi_noise(self):
        x0 = np.array([0.2, 0.9])
        np.testing.assert_allclose(forward_jump(x0, 30, np.zeros(2), self.sched),
                                   math.sqrt(self.sched.alpha_bar[30]) * x0)

    def test_iterated_equals_closed_form(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-1, 1, (32, 2))
        chain = build_noise_chain(x0.shape, self.sched, seed=4)
        x = x0
        for t in range(self.sched.T):
            x = forward_step(x, t, chain.single[t], self.sched)
            np.testing.assert_allclose(x, forward_jump(x0, t, chain.multi[t], self.sched), rtol=0, atol=1e-5)

    def test_torch_tensors(self):
        x0 = torch.randn(4, 2, dtype=torch.float64)
        eps = torch.randn(4, 2, dtype=torch.float64)
        out = forward_jump(x0, 5, eps, self.sched)
        assert isinstance(out, torch.Tensor)


class TestCompose:
    sched = make_schedule(100, 1e-4, 0.02)

    def test_zero(self):
        assert np.all(compose_noise(np.zeros(3), np.zeros(3), 5, self.sched) == 0)

    def test_t0_rejected(self):
        with pytest.raises(IndexError):
            compose_noise(np.zeros(3), np.zeros(3), 0, self.sched)

    @pytest.mark.parametrize("t", [1, 10, 99])
    def test_unit_variance(self, t):
        rng = np.random.default_rng(t)
        out = compose_noise(rng.standard_normal(N_MC), rng.standard_normal(N_MC), t, self.sched)
        assert abs(out.mean()) < 3 * math.sqrt(1 / N_MC)
        assert abs(out.var(ddof=1) - 1) < 3 * math.sqrt(2 / (N_MC - 1))

    def test_variance_identity(self):
        s = self.sched
        for t in range(1, s.T):
            lhs = s.alpha[t] * (1 - s.alpha_bar[t - 1]) + s.beta[t]
            assert lhs == pytest.approx(1 - s.alpha_bar[t], rel=1e-12)


class TestNoiseChain:
    sched = make_schedule(30, 1e-4, 0.05)

    def test_base_case(self):
        ch = build_noise_chain((6, 2), self.sched, 0)
        np.testing.assert_array_equal(ch.multi[0], ch.single[0])

    def test_deterministic(self):
        a, b = build_noise_chain((6, 2), self.sched, 9), build_noise_chain((6, 2), self.sched, 9)
        np.testing.assert_array_equal(a.multi, b.multi)

    def test_multi_marginals(self):
        ch = build_noise_chain((N_MC,), self.sched, 5)
        for t in (0, 10, 29):
            assert abs(ch.multi[t].var(ddof=1) - 1) < 3 * math.sqrt(2 / (N_MC - 1))

    def test_lazy_matches_eager(self):
        lazy = LazyNoiseChain((8, 2), self.sched, seed=3)
        eager = lazy.materialize()
        for t in range(self.sched.T - 1, -1, -1):
            np.testing.assert_allclose(lazy.multi(t), eager.multi[t], rtol=0, atol=1e-6)

    def test_lazy_matches_eager_long(self):
        sched = make_schedule(500, 1e-4, 0.02)
        lazy = LazyNoiseChain((4, 2), sched, seed=1)
        eager = lazy.materialize()
        for t in (499, 250, 20, 1, 0):
            np.testing.assert_allclose(lazy.multi(t), eager.multi[t], rtol=0, atol=1e-6)

    def test_lazy_cannot_go_up(self):
        lazy = LazyNoiseChain((2,), self.sched, seed=0)
        lazy.multi(5)
        with pytest.raises(IndexError):
            lazy.multi(6)


class TestReverse:
    def test_single_step_inversion(self):
        s = make_schedule(2, 0.01, 0.02)
        rng = np.random.default_rng(0)
        x0, eps = rng.standard_normal(10), rng.standard_normal(10)
        x = forward_jump(x0, 0, eps, s)
        np.testing.assert_allclose(ddpm_step(x, eps, 0, rng.standard_normal(10), s), x0, rtol=0, atol=1e-9)

    def test_posterior_std_zero_at_first_step(self):
        s = make_schedule(10, 1e-3, 0.02)
        assert posterior_std(0, s) == 0.0
        assert posterior_std(5, s) > 0

    def test_oracle_ddpm_rollout(self):
        s = make_schedule(50, 1e-4, 0.02)
        rng = np.random.default_rng(1)
        x0 = rng.uniform(-1, 1, (64, 2))
        chain = build_noise_chain(x0.shape, s, 2)
        x = forward_jump(x0, s.T - 1, chain.multi[-1], s)
        for t in reversed(range(s.T)):
            x = ddpm_step(x, exact_eps(x, x0, t, s), t, None, s)
        assert np.max(np.abs(x - x0)) < 1e-3

    def test_ddim_single_jump(self):
        s = make_schedule(500)
        rng = np.random.default_rng(3)
        x0, eps = rng.uniform(-1, 1, 20), rng.standard_normal(20)
        x = forward_jump(x0, 499, eps, s)
        np.testing.assert_allclose(ddim_step(x, eps, 499, -1, s), x0, rtol=0, atol=1e-9)
        # landing on step 0 gives the noisy sample there
        np.testing.assert_allclose(ddim_step(x, eps, 499, 0, s), forward_jump(x0, 0, eps, s), atol=1e-9)

    def test_ddim_deterministic(self):
        s = make_schedule(100)
        x, e = np.ones(3), np.full(3, 0.5)
        assert np.array_equal(ddim_step(x, e, 50, 10, s), ddim_step(x, e, 50, 10, s))

    def test_ddim_order(self):
        s = make_schedule(100)
        with pytest.raises(ValueError):
            ddim_step(np.ones(2), np.ones(2), 10, 10, s)

    def test_predict_x0(self):
        s = make_schedule(100)
        x0, eps = np.array([0.1, 0.2]), np.array([1.0, -1.0])
        np.testing.assert_allclose(predict_x0(forward_jump(x0, 40, eps, s), eps, 40, s), x0, atol=1e-12)


class TestStepSchedule:
    def test_full(self):
        assert make_step_schedule(500, 500) == list(range(499, -1, -1))

    def test_two(self):
        assert make_step_schedule(500, 2) == [499, 0]

    @pytest.mark.parametrize("steps", [21, 51, 3, 499])
    def test_even_gaps(self, steps):
        sch = make_step_schedule(500, steps)
        gaps = -np.diff(sch)
        assert len(sch) == steps and sch[0] == 499 and sch[-1] == 0
        assert np.all(gaps > 0) and gaps.max() - gaps.min() <= 1

    @pytest.mark.parametrize("steps", [1, 501])
    def test_invalid(self, steps):
        with pytest.raises(ValueError):
            make_step_schedule(500, steps)
