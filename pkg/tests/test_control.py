import math

import numpy as np
import pytest

from mimostream import channel, control, kernels
from mimostream.config import config_from_dict
from mimostream.errors import ConfigurationError

from conftest import paper_dict
from oracles import random_precoder_sets

LN2 = math.log(2.0)


def small_config(k=2, nt=3, nr=2, **over):
    return config_from_dict(paper_dict(pairs=k, tx_antennas=nt, rx_antennas=nr, **over))


class TestActiveSet:
    def test_all_positive_empty(self):
        assert control.active_set(np.array([0.1, 0.0, 2.0])).size == 0

    def test_all_negative_full(self):
        assert control.active_set(np.array([-1.0, -2.0])).tolist() == [0, 1]

    def test_mixed(self):
        assert control.active_set(np.array([-1.0, 0.5, -0.1, 0.0])).tolist() == [0, 2]


class TestSingleUserWaterfill:
    def test_zero_level_silent(self, rng):
        h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        assert not np.any(control.single_user_waterfill(h, 1.0, 0.0))

    def test_scalar_power(self):
        h = np.array([[1.0 + 0j]])
        f = control.single_user_waterfill(h, 1.0, 2.0)
        assert abs(f[0, 0]) ** 2 == pytest.approx(1.0)

    def test_beats_random_equal_power(self, rng):
        cfg = small_config(k=1, nt=4, nr=2)
        h = channel.sample_channel(rng, cfg)
        level = 3.0
        f_star = control.single_user_waterfill(h[0, 0], cfg.L[0, 0], level)
        grad = -level * LN2 / cfg.bandwidth_hz
        F_star = f_star[None]
        obj_star = control.wmmse_objective(h, cfg, [grad], F_star)
        power = channel.transmit_power(f_star)
        assert power > 0
        for F in random_precoder_sets(rng, 1, 4, 2, power, 300):
            assert control.wmmse_objective(h, cfg, [grad], F) >= obj_star - 1e-9


class TestWmmseObjective:
    def test_zero_precoders(self, paper_config, rng):
        h = channel.sample_channel(rng, paper_config)
        F = np.zeros((5, 5, 2), dtype=complex)
        assert control.wmmse_objective(h, paper_config, -np.ones(5), F) == 0.0

    def test_scalar_minimum_at_waterfill(self):
        cfg = small_config(k=1, nt=1, nr=1)
        h = np.ones((1, 1, 1, 1), dtype=complex)
        l_kk = cfg.L[0, 0]
        level = 4.0
        grad = np.array([-level * LN2 / cfg.bandwidth_hz])
        p_star = max(level - 1.0 / l_kk, 0.0)

        def obj(p):
            F = np.full((1, 1, 1), math.sqrt(p), dtype=complex)
            return control.wmmse_objective(h, cfg, grad, F)

        around = [obj(p) for p in np.linspace(max(p_star - 0.5, 0.0), p_star + 0.5, 21)]
        assert min(around) == pytest.approx(obj(p_star), rel=1e-9)

    def test_composes_rate_and_receiver(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        F = rng.standard_normal((2, 3, 2)) + 1j * rng.standard_normal((2, 3, 2))
        grad = np.array([-2e-6, -1e-6])
        expected = 0.0
        for k in range(2):
            u = channel.mmse_receiver(h, cfg, F, k)
            expected += channel.transmit_power(F[k]) + grad[k] * channel.rate(h, cfg, F, u, k)
        assert control.wmmse_objective(h, cfg, grad, F) == pytest.approx(expected, rel=1e-10)


class TestWmmseSolve:
    def test_inactive_gradient_silences_everything(self, paper_config, rng):
        h = channel.sample_channel(rng, paper_config)
        dec = control.wmmse_solve(h, paper_config, np.full(5, 1e-6))
        assert not np.any(dec.F) and not np.any(dec.U)
        assert dec.final_objective == 0.0

    def test_zero_weight_pairs_get_zero_matrices(self, rng):
        cfg = small_config(k=3, nt=3, nr=2)
        h = channel.sample_channel(rng, cfg)
        grad = np.array([-1e-6, 0.0, -2e-6])
        dec = control.wmmse_solve(h, cfg, grad)
        assert not np.any(dec.F[1]) and not np.any(dec.U[1])
        assert np.any(dec.F[0]) and np.any(dec.F[2])

    def test_single_pair_matches_waterfilling_gram(self, rng):
        cfg = small_config(k=1, nt=4, nr=3)
        opts = control.WmmseOptions(max_iters=5000, obj_tol=1e-15)
        for _ in range(5):
            h = channel.sample_channel(rng, cfg)
            grad = np.array([-1.5e-6])
            dec = control.wmmse_solve(h, cfg, grad, opts)
            f_wf = control.single_user_waterfill(
                h[0, 0], cfg.L[0, 0], -grad[0] * cfg.bandwidth_hz / LN2
            )
            gram_a = dec.F[0] @ dec.F[0].conj().T
            gram_b = f_wf @ f_wf.conj().T
            assert np.linalg.norm(gram_a - gram_b) < 1e-4

    def test_surrogate_descends(self, rng):
        cfg = small_config(k=3, nt=4, nr=2)
        for _ in range(40):
            h = channel.sample_channel(rng, cfg)
            grad = -np.abs(rng.normal(1e-6, 5e-7, 3))
            dec = control.wmmse_solve(h, cfg, grad)
            diffs = np.diff(dec.surrogate_trace)
            assert np.all(diffs <= 1e-9)

    def test_beats_random_precoder_sets(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        grad = np.array([-2e-6, -2e-6])
        dec = control.wmmse_solve(h, cfg, grad,
                                  control.WmmseOptions(max_iters=500, obj_tol=1e-12))
        total_power = float(np.sum(np.abs(dec.F) ** 2))
        for F in random_precoder_sets(rng, 2, 3, 2, total_power, 1000):
            assert control.wmmse_objective(h, cfg, grad, F) >= dec.final_objective - 1e-9

    def test_deterministic(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        grad = np.array([-1e-6, -3e-6])
        a = control.wmmse_solve(h, cfg, grad)
        b = control.wmmse_solve(h, cfg, grad)
        assert np.array_equal(a.F, b.F) and np.array_equal(a.U, b.U)
        assert a.surrogate_trace == b.surrogate_trace

    @pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="compiled path unavailable")
    def test_kernel_matches_reference(self, rng):
        cfg = small_config(k=3, nt=4, nr=2)
        for _ in range(15):
            h = channel.sample_channel(rng, cfg)
            grad = -np.abs(rng.normal(1e-6, 5e-7, 3))
            fast = control.wmmse_solve(h, cfg, grad, use_kernel=True)
            ref = control.wmmse_solve(h, cfg, grad, use_kernel=False)
            assert fast.iters_used == ref.iters_used
            assert np.allclose(fast.F, ref.F, atol=1e-9)
            assert np.allclose(fast.rates, ref.rates, rtol=1e-8, atol=1e-3)
            assert np.allclose(fast.surrogate_trace, ref.surrogate_trace, rtol=1e-9)

    def test_random_seeded_init_converges_to_same_objective(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        grad = np.array([-2e-6, -1.5e-6])
        tight = control.WmmseOptions(max_iters=4000, obj_tol=1e-14)
        a = control.wmmse_solve(h, cfg, grad, tight)
        b = control.wmmse_solve(
            h, cfg, grad,
            control.WmmseOptions(max_iters=4000, obj_tol=1e-14,
                                 init_scheme="random-seeded", rng_seed=7),
        )
        assert a.final_objective == pytest.approx(b.final_objective, rel=1e-6)

    def test_stationarity_by_finite_differences(self, rng):
        # at convergence the smooth objective's gradient vanishes
        cfg = small_config()
        h = channel.sample_channel(np.random.default_rng(42), cfg)
        grad = np.array([-2e-6, -2.5e-6])
        dec = control.wmmse_solve(h, cfg, grad,
                                  control.WmmseOptions(max_iters=20000, obj_tol=1e-16))
        F0 = dec.F
        f0 = control.wmmse_objective(h, cfg, grad, F0)
        h_step = 1e-5 * (1.0 + np.abs(F0).max())
        worst = 0.0
        for k in range(2):
            for i in range(cfg.nt):
                for j in range(cfg.d):
                    for part in (1.0, 1j):
                        delta = np.zeros_like(F0)
                        delta[k, i, j] = part * h_step
                        deriv = (control.wmmse_objective(h, cfg, grad, F0 + delta)
                                 - control.wmmse_objective(h, cfg, grad, F0 - delta)) \
                            / (2.0 * h_step)
                        worst = max(worst, abs(deriv))
        assert worst / max(1.0, abs(f0)) < 1e-5


class TestZfp:
    def test_two_pair_exact_nulling(self, rng):
        cfg = small_config(k=2, nt=5, nr=2)
        h = channel.sample_channel(rng, cfg)
        F = control.zfp_precoder(h, cfg, power_per_pair=2.0)
        assert np.linalg.norm(h[0, 1] @ F[1]) < 1e-10
        assert np.linalg.norm(h[1, 0] @ F[0]) < 1e-10

    def test_single_pair_dominant_subspace(self, rng):
        cfg = small_config(k=1, nt=4, nr=2)
        h = channel.sample_channel(rng, cfg)
        F = control.zfp_precoder(h, cfg, power_per_pair=3.0)
        # beams span the top right-singular subspace of the direct channel
        _, _, vh = np.linalg.svd(h[0, 0])
        proj = vh[:2].conj().T @ vh[:2]
        assert np.linalg.norm(proj @ F[0] - F[0]) < 1e-10

    def test_power_scaling(self, rng):
        for k, nt, nr in ((2, 5, 2), (5, 5, 2)):
            cfg = small_config(k=k, nt=nt, nr=nr)
            h = channel.sample_channel(rng, cfg)
            F = control.zfp_precoder(h, cfg, power_per_pair=1.7)
            for kk in range(k):
                assert channel.transmit_power(F[kk]) == pytest.approx(1.7, abs=1e-10)

    def test_needs_enough_antennas(self, rng):
        cfg = small_config(k=2, nt=3, nr=2)
        object.__setattr__(cfg, "nt", 1)  # sabotage after validation
        with pytest.raises(ConfigurationError):
            control.zfp_precoder(np.zeros((2, 2, 2, 1), dtype=complex), cfg, 1.0)


class TestCop:
    def test_tiny_alpha_all_silent(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        dec = control.cop_precoder(h, cfg, alpha=1e-9)
        assert float(np.sum(np.abs(dec.F) ** 2)) < 1e-12

    def test_weight_equivalence_with_wmmse(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        alpha = 1.3
        dec_a = control.cop_precoder(h, cfg, alpha)
        dec_b = control.wmmse_solve(
            h, cfg, np.full(2, -alpha * LN2 / cfg.bandwidth_hz)
        )
        assert np.array_equal(dec_a.F, dec_b.F)

    def test_alpha_monotone_in_rate_and_power(self, rng):
        cfg = small_config()
        totals = []
        draws = [channel.sample_channel(rng, cfg) for _ in range(60)]
        for alpha in (0.7, 1.4, 2.8):
            rate_acc = power_acc = 0.0
            for h in draws:
                dec = control.cop_precoder(h, cfg, alpha)
                rate_acc += float(np.sum(dec.rates))
                power_acc += float(np.sum(np.abs(dec.F) ** 2))
            totals.append((rate_acc, power_acc))
        assert totals[0][0] < totals[1][0] < totals[2][0]
        assert totals[0][1] < totals[1][1] < totals[2][1]

    def test_rejects_nonpositive_alpha(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        with pytest.raises(ConfigurationError):
            control.cop_precoder(h, cfg, 0.0)


class TestQwp:
    def test_full_buffers_all_silent(self, paper_config, rng):
        h = channel.sample_channel(rng, paper_config)
        q = np.full(5, paper_config.q_high + 1.0)
        dec = control.qwp_precoder(h, paper_config, q, alpha=1e-5)
        assert not np.any(dec.F)

    def test_uniform_queues_reduce_to_cop(self, rng):
        cfg = small_config()
        h = channel.sample_channel(rng, cfg)
        q = np.full(2, 9e4)
        alpha = 2e-5
        dec_a = control.qwp_precoder(h, cfg, q, alpha)
        dec_b = control.cop_precoder(h, cfg, alpha * (cfg.q_high - 9e4))
        assert np.allclose(dec_a.F, dec_b.F, atol=1e-12)

    def test_hungrier_pair_served_more(self, rng):
        cfg = small_config(k=2, nt=4, nr=2)
        q = np.array([3e4, 1.2e5])
        wins = 0
        n = 200
        for _ in range(n):
            h = channel.sample_channel(rng, cfg)
            dec = control.qwp_precoder(h, cfg, q, alpha=2e-5)
            wins += dec.rates[0] > dec.rates[1]
        assert wins > 0.9 * n
