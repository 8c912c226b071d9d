"""Acceptance suite: one test per release criterion, stated tolerances.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
PASS lines as they complete.  The baseline-dominance experiment (criterion
8) simulates 4 controllers x 20 paired seeds x 1e5 slots and dominates the
wall-clock; everything else finishes in seconds to a couple of minutes.
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mimostream import channel, control, oracle, sim, specfun, valuefn
from mimostream.cli import main as cli_main
from mimostream.config import config_from_dict

from conftest import duo_dict, paper_dict
from oracles import (
    quad_density,
    quad_expected_power,
    quad_expected_rate,
    quad_meijer,
    quad_upper_gamma,
)

LN2 = math.log(2.0)


def report(criterion: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {criterion:02d} [{status}] {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def test_01_special_function_fidelity():
    t0 = time.perf_counter()
    worst_g = 0.0
    for m in (1, 2, 4, 6, 9):
        for x in (1e-4, 0.2, 1.0, 5.0, 25.0):
            ref = quad_upper_gamma(m, x)
            if ref > 1e-250:
                worst_g = max(worst_g, abs(specfun.upper_incomplete_gamma(m, x) - ref) / ref)
    worst_m = 0.0
    for n in (1, 2, 4, 7, 10):
        for z in (1e-4, 1e-2, 0.7, 4.0, 20.0):
            ref = quad_meijer(n, z)
            worst_m = max(worst_m, abs(specfun.meijer_special(n, z) - ref) / ref)
    worst_a = 0.0
    z = 1e-8
    for n in (1, 2, 3, 5, 8):
        asym = math.factorial(n - 1) * (-math.log(z) + specfun.digamma_int(n))
        worst_a = max(worst_a, abs(specfun.meijer_special(n, z) - asym) / asym)
    elapsed = time.perf_counter() - t0
    ok = worst_g < 1e-8 and worst_m < 1e-8 and worst_a < 1e-3 and elapsed < 1.0
    report(1, ok, f"gamma {worst_g:.2e}, meijer {worst_m:.2e}, "
                  f"asymptotic {worst_a:.2e}, runtime {elapsed:.2f}s")


def test_02_density_normalisation():
    worst = 0.0
    for nt, nr in ((1, 1), (2, 2), (5, 2), (4, 4)):
        val = quad_density(specfun.sv_coeffs(nt, nr))
        worst = max(worst, abs(val - 1.0))
    report(2, worst < 1e-6, f"max |integral - 1| = {worst:.2e}")


def test_03_closed_form_vs_quadrature():
    rng = np.random.default_rng(31)
    w = 1e6
    l_kk = 0.316
    worst = 0.0
    for nt, nr in ((1, 1), (2, 2), (5, 2)):
        coeffs = specfun.sv_coeffs(nt, nr)
        t = -LN2 / (w * l_kk)
        zs = np.exp(rng.uniform(math.log(1e-3), math.log(20.0), 50))
        for z in zs:
            jp = t / z
            p_ref = quad_expected_power(coeffs, l_kk, w, jp)
            r_ref = quad_expected_rate(coeffs, l_kk, w, jp)
            worst = max(
                worst,
                abs(valuefn.expected_power(coeffs, l_kk, w, jp) - p_ref) / max(p_ref, 1e-30),
                abs(valuefn.expected_rate(coeffs, l_kk, w, jp) - r_ref) / max(r_ref, 1e-30),
            )
    report(3, worst < 1e-7, f"50 water levels x 3 arrays: worst rel err {worst:.2e}")


def test_04_fixed_point_suite(paper_flow):
    t0 = time.perf_counter()
    flow = paper_flow
    qs = np.linspace(0.0, 2.0 * flow.q_high, 200)
    vals = np.array([valuefn.solve_jprime(flow, q) for q in qs])
    resid = max(abs(flow.g(q, v)) for q, v in zip(qs, vals))
    monotone = bool(np.all(np.diff(vals) >= 0.0))
    at_target = valuefn.solve_jprime(flow, flow.q_star_k) == flow.lambda_k
    tail = valuefn.solve_jprime(flow, 10.0 * flow.q_high)
    tail_err = abs(tail - flow.big_c) / flow.big_c
    elapsed = time.perf_counter() - t0
    ok = (resid < 1e-8 * max(1.0, flow.c_inf) and monotone and at_target
          and tail_err < 1e-6 and elapsed < 10.0)
    report(4, ok, f"|g| {resid:.2e}, monotone {monotone}, J'(Q*)=lambda {at_target}, "
                  f"tail rel {tail_err:.2e}, runtime {elapsed:.2f}s")


def test_05_wmmse_correctness():
    cfg3 = config_from_dict(paper_dict(pairs=3, tx_antennas=4, rx_antennas=2))
    rng = np.random.default_rng(55)
    worst_rise = -np.inf
    for _ in range(500):
        h = channel.sample_channel(rng, cfg3)
        grad = -np.abs(rng.normal(1e-6, 5e-7, 3))
        dec = control.wmmse_solve(h, cfg3, grad)
        if len(dec.surrogate_trace) > 1:
            worst_rise = max(worst_rise, float(np.max(np.diff(dec.surrogate_trace))))
    descent_ok = worst_rise <= 1e-9

    cfg1 = config_from_dict(paper_dict(pairs=1, tx_antennas=4, rx_antennas=3))
    gram_err = 0.0
    opts = control.WmmseOptions(max_iters=5000, obj_tol=1e-15)
    for seed in range(4):
        h = channel.sample_channel(np.random.default_rng(seed), cfg1)
        grad = np.array([-1.5e-6])
        dec = control.wmmse_solve(h, cfg1, grad, opts)
        f_wf = control.single_user_waterfill(
            h[0, 0], cfg1.L[0, 0], -grad[0] * cfg1.bandwidth_hz / LN2
        )
        gram_err = max(gram_err, float(np.linalg.norm(
            dec.F[0] @ dec.F[0].conj().T - f_wf @ f_wf.conj().T
        )))

    cfg2 = config_from_dict(paper_dict(pairs=2, tx_antennas=3, rx_antennas=2))
    stat_worst = 0.0
    for seed in (42, 43):
        h = channel.sample_channel(np.random.default_rng(seed), cfg2)
        grad = np.array([-2e-6, -2.5e-6])
        dec = control.wmmse_solve(
            h, cfg2, grad, control.WmmseOptions(max_iters=20000, obj_tol=1e-16)
        )
        f0 = dec.F
        base = control.wmmse_objective(h, cfg2, grad, f0)
        step = 1e-5 * (1.0 + float(np.abs(f0).max()))
        for k in range(2):
            for i in range(cfg2.nt):
                for j in range(cfg2.d):
                    for part in (1.0, 1j):
                        delta = np.zeros_like(f0)
                        delta[k, i, j] = part * step
                        deriv = (control.wmmse_objective(h, cfg2, grad, f0 + delta)
                                 - control.wmmse_objective(h, cfg2, grad, f0 - delta)
                                 ) / (2.0 * step)
                        stat_worst = max(stat_worst, abs(deriv) / max(1.0, abs(base)))
    ok = descent_ok and gram_err < 1e-4 and stat_worst < 1e-5
    report(5, ok, f"descent max rise {worst_rise:.2e}, K=1 gram {gram_err:.2e}, "
                  f"stationarity {stat_worst:.2e}")


def test_06_decoupling_consistency():
    cfg = config_from_dict(duo_dict(
        path_gains={"mode": "snr", "snr_db": -5.0, "cross_ratio": 0.0}))
    model = valuefn.build_value_model(cfg)
    bitwise = True
    for q in (np.array([1e4, 9e4]), np.array([1.3e5, 2.4e5]), np.array([0.0, 0.0])):
        grad = valuefn.value_gradient(model, q)
        bitwise = bitwise and np.array_equal(grad, model.jprime_vec(q))

    levels = [0.0, 2.0, 5.5, 9.0, 14.0]
    samples = oracle.sample_channel_set(cfg, 12, 5)
    mdp2 = oracle.build_discrete_mdp(
        cfg, 40, samples,
        {"include_zero": True, "waterfill_levels": [levels, levels],
         "weight_vectors": []})
    theta2, _, _ = oracle.relative_value_iteration(mdp2, tol=1e-10)
    parts = []
    solo = config_from_dict(duo_dict(pairs=1, tx_antennas=2))
    for k in range(2):
        mdp1 = oracle.build_discrete_mdp(
            solo, 40, np.ascontiguousarray(samples[:, k:k + 1, k:k + 1]),
            {"include_zero": True, "waterfill_levels": [levels],
             "weight_vectors": []})
        t1, _, _ = oracle.relative_value_iteration(mdp1, tol=1e-10)
        parts.append(t1)
    split_err = abs(theta2 - sum(parts)) / abs(theta2)
    ok = bitwise and split_err < 1e-6
    report(6, ok, f"gradient bitwise {bitwise}, |theta2 - sum| rel {split_err:.2e}")


@pytest.mark.slow
def test_07_gap_trend():
    base = duo_dict()
    ratios = (0.1, 0.05, 0.01)
    gaps = []
    details = []
    for rho in ratios:
        cfg = config_from_dict({**base, "path_gains":
                                {"mode": "snr", "snr_db": -5.0, "cross_ratio": rho}})
        model = valuefn.build_value_model(cfg)
        rep = oracle.oracle_report(cfg, model, grid_points=64, n_samples=32,
                                   seed=3, vi_tol=1e-8)
        gaps.append(rep["gap"])
        details.append(f"rho={rho}: gap={rep['gap']:.4f}")
    nonneg = all(g >= -1e-9 for g in gaps)
    monotone = gaps[0] > gaps[1] > gaps[2]
    report(7, nonneg and monotone, "; ".join(details))


@pytest.fixture(scope="module")
def dominance_runs():
    """Criterion 8 experiment: 4 controllers x 20 paired seeds x 1e5 slots."""
    cfg = config_from_dict(paper_dict())
    opts = control.WmmseOptions(max_iters=60, obj_tol=1e-5)
    model_dict = valuefn.value_model_to_dict(valuefn.build_value_model(cfg))
    alpha_cop = sim.calibrate_uniform_weight(cfg, seed=cfg.rng_seed, opts=opts)
    alpha_qwp = sim.calibrate_qwp_alpha(cfg, seed=cfg.rng_seed, opts=opts)
    seeds = list(range(20))
    horizon = 100000
    tasks = []
    for name, alpha, md in (("proposed", None, model_dict), ("zfp", None, None),
                            ("cop", alpha_cop, None), ("qwp", alpha_qwp, None)):
        for seed in seeds:
            tasks.append(dict(config=cfg, controller_name=name,
                              master_seed=cfg.rng_seed, axis_index=0,
                              seed_index=seed, horizon=horizon,
                              model_dict=md, alpha=alpha, opts=opts,
                              cell=dict(controller=name, seed=seed)))
    results = sim._run_tasks(tasks, n_workers=2)
    runs: dict[str, list] = {}
    for task, metrics in zip(tasks, results):
        runs.setdefault(task["cell"]["controller"], []).append(metrics)
    return cfg, runs


def one_sided_sign_test(wins: int, n: int) -> float:
    return sum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0 ** n


@pytest.mark.slow
def test_08_baseline_dominance(dominance_runs):
    _, runs = dominance_runs
    proposed = [m.objective for m in runs["proposed"]]
    lines = []
    ok = True
    for name in ("zfp", "cop", "qwp"):
        base = [m.objective for m in runs[name]]
        wins = sum(p < b for p, b in zip(proposed, base))
        p_val = one_sided_sign_test(wins, len(proposed))
        ok = ok and p_val < 0.05
        lines.append(f"{name}: mean {np.mean(base):.2f} vs proposed "
                     f"{np.mean(proposed):.2f}, wins {wins}/20, p={p_val:.2g}")
    report(8, ok, "; ".join(lines))


@pytest.mark.slow
def test_09_smooth_approximation_fidelity(dominance_runs):
    _, runs = dominance_runs
    worst = 0.0
    for metrics_list in runs.values():
        for m in metrics_list:
            worst = max(
                worst,
                float(np.max(np.abs(m.interruption_smooth - m.interruption_prob))),
                float(np.max(np.abs(m.overflow_smooth - m.overflow_prob))),
            )
    report(9, worst < 0.02, f"max |smooth - indicator| = {worst:.2e} over "
                            f"{sum(len(v) for v in runs.values())} runs")


def test_10_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(duo_dict()))

    def run_twice(args, out: Path) -> bool:
        digests = []
        for _ in range(2):
            assert cli_main(args) == 0
            digests.append(hashlib.sha256(out.read_bytes()).hexdigest())
        return digests[0] == digests[1]

    vm = tmp_path / "vm.json"
    run_json = tmp_path / "run.json"
    sweep_json = tmp_path / "sweep.json"
    gap_json = tmp_path / "gap.json"
    checks = {
        "precompute": run_twice(
            ["precompute", str(cfg_path), "--out", str(vm)], vm),
        "run": run_twice(
            ["run", str(cfg_path), "--controller", "proposed", "--slots", "300",
             "--seeds", "0", "--model", str(vm), "--out", str(run_json)], run_json),
        "sweep": run_twice(
            ["sweep", str(cfg_path), "--axis", "snr", "--values", "-5", "0",
             "--seeds", "0", "--slots", "80", "--controllers", "zero", "zfp",
             "--threads", "2", "--out", str(sweep_json)], sweep_json),
        "oracle-gap": run_twice(
            ["oracle-gap", str(cfg_path), "--grid-points", "32",
             "--channel-samples", "6", "--out", str(gap_json)], gap_json),
    }
    report(10, all(checks.values()),
           ", ".join(f"{k}={'ok' if v else 'DIFFERS'}" for k, v in checks.items()))
