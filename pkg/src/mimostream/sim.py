"""Closed-loop slot simulation, metric accumulation and parameter sweeps.

Per slot: draw fading, let the controller pick precoders/decorrelators,
collect the per-pair rates, charge the per-stage cost at the current queue
state, then advance the playback queues.  Episodes are deterministic given
(controller, config, seed); sweeps pair controllers on common random numbers
by reusing one channel seed per (axis value, seed) cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import channel, control, kernels, valuefn
from .config import SystemConfig
from .errors import ConfigurationError, NumericalError

LN2 = math.log(2.0)

CONTROLLER_NAMES = ("proposed", "zfp", "cop", "qwp", "zero")


def episode_rng(master_seed: int, *key) -> np.random.Generator:
    """Counter-based generator for one episode, stable under parallelism."""
    seq = np.random.SeedSequence((int(master_seed),) + tuple(int(x) for x in key))
    return np.random.Generator(np.random.Philox(seq))


def step_queue(q, rates, mu, tau):
    """One slot of playback-queue dynamics: drain first, then arrivals."""
    q = np.asarray(q, dtype=float)
    return np.maximum(q - np.asarray(mu) * tau, 0.0) + np.asarray(rates) * tau


@dataclass
class Metrics:
    """Time-averaged episode metrics (post-warmup)."""

    avg_power: np.ndarray
    interruption_prob: np.ndarray
    interruption_smooth: np.ndarray
    overflow_prob: np.ndarray
    overflow_smooth: np.ndarray
    objective: float
    horizon: int
    warmup: int
    q_initial: np.ndarray = field(default=None)
    q_final: np.ndarray = field(default=None)
    total_arrivals: np.ndarray = field(default=None)
    total_served: np.ndarray = field(default=None)

    def to_dict(self) -> dict:
        return {
            "avg_power_w": self.avg_power.tolist(),
            "interruption_prob": self.interruption_prob.tolist(),
            "interruption_smooth": self.interruption_smooth.tolist(),
            "overflow_prob": self.overflow_prob.tolist(),
            "overflow_smooth": self.overflow_smooth.tolist(),
            "objective": self.objective,
            "horizon": self.horizon,
            "warmup": self.warmup,
        }


class ProposedController:
    """Gradient-weighted WMMSE control driven by the value model."""

    name = "proposed"

    def __init__(self, config: SystemConfig, model: valuefn.ValueModel,
                 opts: control.WmmseOptions | None = None):
        self.config = config
        self.model = model
        self.opts = opts or control.WmmseOptions()

    def decide(self, H, q):
        grad = valuefn.value_gradient(self.model, q)
        return control.wmmse_solve(H, self.config, grad, self.opts)


class ZeroController:
    """Never transmits; the queues drain at the playback rate."""

    name = "zero"

    def __init__(self, config: SystemConfig):
        k, nt, nr, d = config.K, config.nt, config.nr, config.d
        self._decision = control.SlotDecision(
            F=np.zeros((k, nt, d), dtype=complex),
            U=np.zeros((k, nr, d), dtype=complex),
            active=np.array([], dtype=int),
        )

    def decide(self, H, q):
        return self._decision


class ZfpController:
    """Zero-forcing beams at fixed per-pair power, MMSE receive."""

    name = "zfp"

    def __init__(self, config: SystemConfig, power_per_pair: float | None = None):
        self.config = config
        self.power = config.ref_power_w if power_per_pair is None else power_per_pair
        self._fast = kernels.HAVE_NUMBA and config.zeta == 1.0

    def decide(self, H, q):
        F = control.zfp_precoder(H, self.config, self.power)
        if self._fast:
            U, rates_l2 = kernels.mmse_rates(
                np.ascontiguousarray(H), self.config.L, F, self.config.zeta
            )
            rates = self.config.bandwidth_hz * rates_l2
        else:
            U = channel.mmse_receivers(H, self.config, F)
            rates = None
        return control.SlotDecision(F=F, U=U, active=np.arange(self.config.K),
                                    rates=rates)


class CopController:
    """CSI-only WMMSE with a fixed uniform rate weight."""

    name = "cop"

    def __init__(self, config: SystemConfig, alpha: float,
                 opts: control.WmmseOptions | None = None):
        self.config = config
        self.alpha = alpha
        self.opts = opts or control.WmmseOptions()

    def decide(self, H, q):
        return control.cop_precoder(H, self.config, self.alpha, self.opts)


class QwpController:
    """Queue-weighted WMMSE: rate weight proportional to buffer headroom."""

    name = "qwp"

    def __init__(self, config: SystemConfig, alpha: float,
                 opts: control.WmmseOptions | None = None):
        self.config = config
        self.alpha = alpha
        self.opts = opts or control.WmmseOptions()

    def decide(self, H, q):
        return control.qwp_precoder(H, self.config, q, self.alpha, self.opts)


def default_q0(config: SystemConfig) -> np.ndarray:
    """Start at the per-flow target queue level."""
    return np.array([
        valuefn.q_star(config.gamma[k], config.beta[k], config.eta,
                       config.q_low, config.q_high)
        for k in range(config.K)
    ])


def slot_rates(H, config, decision) -> np.ndarray:
    """Per-pair achieved rates for one slot's decision."""
    return np.array([
        channel.rate(H, config, decision.F, decision.U[k], k)
        for k in range(config.K)
    ])


def run_episode(controller, config: SystemConfig, rng: np.random.Generator,
                horizon: int, warmup: int | None = None,
                q0: np.ndarray | None = None, collect_trace: bool = False):
    """Simulate one episode; returns (Metrics, trace-rows or None).

    The per-stage cost is charged at the pre-transition queue state.  The
    first ``warmup`` slots (default 10% of the horizon) are excluded from
    the averages.
    """
    if warmup is None:
        warmup = horizon // 10
    if not 0 <= warmup < horizon:
        raise ConfigurationError(f"need 0 <= warmup < horizon, got {warmup}, {horizon}")
    k_pairs = config.K
    q = np.array(default_q0(config) if q0 is None else np.asarray(q0, dtype=float))
    if q.shape != (k_pairs,) or np.any(q < 0):
        raise ConfigurationError("q0 must be a non-negative K-vector")

    n_avg = horizon - warmup
    power_acc = np.zeros(k_pairs)
    int_ind = np.zeros(k_pairs)
    int_smooth = np.zeros(k_pairs)
    ovf_ind = np.zeros(k_pairs)
    ovf_smooth = np.zeros(k_pairs)
    arrivals = np.zeros(k_pairs)
    served = np.zeros(k_pairs)
    q_init = q.copy()
    trace = [] if collect_trace else None

    sample = getattr(controller, "sample_channel", None)
    for t in range(horizon):
        H = sample(rng) if sample is not None else channel.sample_channel(rng, config)
        try:
            decision = controller.decide(H, q)
        except NumericalError as exc:
            raise NumericalError(f"controller failed at slot {t}: {exc}") from exc
        rates = decision.rates if decision.rates is not None \
            else slot_rates(H, config, decision)
        powers = np.abs(decision.F.reshape(k_pairs, -1)) ** 2
        powers = powers.sum(axis=1)
        if t >= warmup:
            power_acc += powers
            int_ind += q < config.q_low
            ovf_ind += q > config.q_high
            int_smooth += np.exp(-config.eta * np.maximum(q - config.q_low, 0.0))
            ovf_smooth += np.exp(-config.eta * np.maximum(config.q_high - q, 0.0))
        if collect_trace:
            act = np.zeros(k_pairs, dtype=int)
            act[decision.active] = 1
            for k in range(k_pairs):
                trace.append((t, k, q[k], rates[k], powers[k], act[k]))
        served += np.minimum(config.mu * config.slot_s, q)
        arrivals += rates * config.slot_s
        q = step_queue(q, rates, config.mu, config.slot_s)

    avg_power = power_acc / n_avg
    int_smooth /= n_avg
    ovf_smooth /= n_avg
    objective = float(np.sum(
        avg_power + config.gamma * int_smooth + config.beta * ovf_smooth
    ))
    metrics = Metrics(
        avg_power=avg_power,
        interruption_prob=int_ind / n_avg,
        interruption_smooth=int_smooth,
        overflow_prob=ovf_ind / n_avg,
        overflow_smooth=ovf_smooth,
        objective=objective,
        horizon=horizon,
        warmup=warmup,
        q_initial=q_init,
        q_final=q,
        total_arrivals=arrivals,
        total_served=served,
    )
    return metrics, trace


def calibrate_uniform_weight(config: SystemConfig, n_draws: int = 192,
                             seed: int = 0,
                             opts: control.WmmseOptions | None = None) -> float:
    """Rate-matching weight for the CSI-only baseline.

    Finds the uniform WMMSE weight at which the Monte Carlo mean per-pair
    rate over a fixed fading sample equals the mean playback rate; the
    CSI-only policy has no queue feedback, so this weight is unique.
    """
    opts = opts or control.WmmseOptions()
    rng = episode_rng(seed, 0xCA11B)
    draws = [channel.sample_channel(rng, config) for _ in range(n_draws)]
    target = float(np.mean(config.mu))

    def mean_rate(alpha: float) -> float:
        acc = 0.0
        for H in draws:
            decision = control.cop_precoder(H, config, alpha, opts)
            acc += float(np.mean(slot_rates(H, config, decision)))
        return acc / n_draws

    coeffs = valuefn.sv_coeffs(config.nt, config.nr)
    lam = valuefn.solve_lambda(coeffs, float(np.min(np.diagonal(config.L))),
                               config.bandwidth_hz, target)
    guess = -lam * config.bandwidth_hz / LN2
    lo, hi = guess / 16.0, guess * 16.0
    f_lo, f_hi = mean_rate(lo) - target, mean_rate(hi) - target
    for _ in range(20):
        if f_lo < 0.0:
            break
        lo /= 4.0
        f_lo = mean_rate(lo) - target
    for _ in range(20):
        if f_hi > 0.0:
            break
        hi *= 4.0
        f_hi = mean_rate(hi) - target
    if not (f_lo < 0.0 < f_hi):
        raise NumericalError("baseline calibration could not bracket the target rate")
    for _ in range(24):
        mid = math.sqrt(lo * hi)
        if mean_rate(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.002:
            break
    return math.sqrt(lo * hi)


def calibrate_qwp_alpha(config: SystemConfig, horizon: int = 4000, seed: int = 0,
                        opts: control.WmmseOptions | None = None,
                        rate_tol: float = 0.02) -> float:
    """Rate-matching tradeoff for the queue-weighted baseline.

    The mean arrival rate of the closed-loop queue-weighted policy saturates
    at the playback rate for every stabilising alpha, so "arrival rate
    equals mu" has no unique solution; the bisection therefore returns the
    boundary alpha at which the calibration run first delivers the playback
    rate to within ``rate_tol``.  Below it the policy starves, above it the
    target carries no further information.
    """
    opts = opts or control.WmmseOptions()
    target = float(np.mean(config.mu))

    def mean_arrival(alpha: float) -> float:
        ctrl = QwpController(config, alpha, opts)
        rng = episode_rng(seed, 0xCA11B, 1)
        metrics, _ = run_episode(ctrl, config, rng, horizon, warmup=0)
        total = float(np.mean(metrics.total_arrivals))
        return total / (horizon * config.slot_s)

    lo = hi = calibrate_uniform_weight(config, n_draws=64, seed=seed,
                                       opts=opts) / config.q_high
    for _ in range(30):
        if mean_arrival(hi) >= (1.0 - rate_tol) * target:
            break
        hi *= 4.0
    else:
        raise NumericalError("qwp calibration: no stabilising alpha found")
    for _ in range(30):
        if mean_arrival(lo) < (1.0 - rate_tol) * target:
            break
        lo /= 4.0
    else:
        raise NumericalError("qwp calibration: arrival target met at alpha -> 0")
    for _ in range(22):
        mid = math.sqrt(lo * hi)
        if mean_arrival(mid) >= (1.0 - rate_tol) * target:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1.01:
            break
    return hi


def make_controllers(config: SystemConfig, names, model: valuefn.ValueModel | None = None,
                     opts: control.WmmseOptions | None = None,
                     calibration_seed: int = 0, calibration_draws: int = 192) -> dict:
    """Instantiate controllers by name, calibrating baselines as needed."""
    out = {}
    for name in names:
        if name == "proposed":
            if model is None:
                model = valuefn.build_value_model(config)
            out[name] = ProposedController(config, model, opts)
        elif name == "zero":
            out[name] = ZeroController(config)
        elif name == "zfp":
            out[name] = ZfpController(config)
        elif name == "cop":
            weight = calibrate_uniform_weight(
                config, n_draws=calibration_draws, seed=calibration_seed, opts=opts
            )
            out[name] = CopController(config, weight, opts)
        elif name == "qwp":
            alpha = calibrate_qwp_alpha(config, seed=calibration_seed, opts=opts)
            out[name] = QwpController(config, alpha, opts)
        else:
            raise ConfigurationError(f"unknown controller {name!r}")
    return out


SWEEP_AXES = ("snr", "pairs", "sensing_distance", "weight_beta")


def derive_config(base: SystemConfig, axis: str, value) -> SystemConfig:
    """Build the scenario for one sweep cell from the base config."""
    raw = dict(base.raw) if base.raw else base.to_dict()
    if axis == "snr":
        gains = dict(raw.get("path_gains", {}))
        if gains.get("mode") != "snr":
            raise ConfigurationError("snr sweep requires path_gains mode 'snr'")
        gains["snr_db"] = float(value)
        raw["path_gains"] = gains
    elif axis == "pairs":
        k = int(value)
        raw["pairs"] = k
        raw["tx_antennas"] = k
        for key in ("playback_rate_bps", "interruption_weight", "overflow_weight"):
            v = raw[key]
            if isinstance(v, list):
                raw[key] = v[0]
    elif axis == "sensing_distance":
        gains = dict(raw.get("path_gains", {}))
        if gains.get("mode") != "snr":
            raise ConfigurationError("sensing-distance sweep requires path_gains mode 'snr'")
        fr = raw.get("friis", {})
        cross = channel.friis_cross_gain(
            10.0 ** (float(fr.get("rx_gain_db", 3.0)) / 10.0),
            10.0 ** (float(fr.get("tx_gain_db", 3.0)) / 10.0),
            float(fr.get("wavelength_m", 0.125)),
            float(value),
        )
        direct = 10.0 ** (float(fr.get("direct_gain_db", -75.0)) / 10.0)
        ratio = cross / direct
        if not ratio < 1.0:
            raise ConfigurationError(f"sensing distance {value} gives cross/direct >= 1")
        gains["cross_ratio"] = ratio
        raw["path_gains"] = gains
    elif axis == "weight_beta":
        raw["interruption_weight"] = float(value)
        raw["overflow_weight"] = float(value)
    else:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; use one of {SWEEP_AXES}")
    from .config import config_from_dict

    return config_from_dict(raw)


def run_cell(config: SystemConfig, controller_name: str, master_seed: int,
             axis_index: int, seed_index: int, horizon: int,
             warmup: int | None = None, model_dict: dict | None = None,
             alpha: float | None = None,
             opts: control.WmmseOptions | None = None) -> Metrics:
    """One (axis value, seed, controller) episode on common random numbers.

    The channel generator key omits the controller so every controller in
    the cell sees identical fading.
    """
    if controller_name == "proposed":
        model = valuefn.value_model_from_dict(model_dict) if model_dict \
            else valuefn.build_value_model(config)
        ctrl = ProposedController(config, model, opts)
    elif controller_name == "zero":
        ctrl = ZeroController(config)
    elif controller_name == "zfp":
        ctrl = ZfpController(config)
    elif controller_name == "cop":
        ctrl = CopController(config, alpha, opts)
    elif controller_name == "qwp":
        ctrl = QwpController(config, alpha, opts)
    else:
        raise ConfigurationError(f"unknown controller {controller_name!r}")
    rng = episode_rng(master_seed, axis_index, seed_index)
    metrics, _ = run_episode(ctrl, config, rng, horizon, warmup)
    return metrics


def sweep(base_config: SystemConfig, axis: str, values, seeds, horizon: int,
          controllers=CONTROLLER_NAMES, warmup: int | None = None,
          opts: control.WmmseOptions | None = None, n_workers: int = 1,
          calibration_draws: int = 192) -> list[dict]:
    """Run all controllers over axis values x seeds; returns flat cell records."""
    if len(values) == 0:
        raise ConfigurationError("sweep needs at least one axis value")
    master_seed = base_config.rng_seed
    tasks = []
    for ai, value in enumerate(values):
        cfg = derive_config(base_config, axis, value)
        model_dict = None
        if "proposed" in controllers:
            model_dict = valuefn.value_model_to_dict(valuefn.build_value_model(cfg))
        alpha_cop = alpha_qwp = None
        if "cop" in controllers:
            alpha_cop = calibrate_uniform_weight(
                cfg, n_draws=calibration_draws, seed=master_seed, opts=opts
            )
        if "qwp" in controllers:
            alpha_qwp = calibrate_qwp_alpha(cfg, seed=master_seed, opts=opts)
        for si, seed in enumerate(seeds):
            for name in controllers:
                alpha = alpha_cop if name == "cop" else alpha_qwp if name == "qwp" else None
                tasks.append(dict(
                    config=cfg, controller_name=name, master_seed=master_seed,
                    axis_index=ai, seed_index=int(seed), horizon=horizon,
                    warmup=warmup, model_dict=model_dict if name == "proposed" else None,
                    alpha=alpha, opts=opts,
                    cell=dict(axis=axis, axis_value=value, controller=name, seed=int(seed)),
                ))
    results = _run_tasks(tasks, n_workers)
    cells = []
    for task, metrics in zip(tasks, results):
        record = dict(task["cell"])
        record["metrics"] = metrics.to_dict()
        cells.append(record)
    return cells


def _cell_worker(task: dict) -> Metrics:
    kwargs = {k: v for k, v in task.items() if k != "cell"}
    return run_cell(**kwargs)


def _run_tasks(tasks, n_workers: int):
    if n_workers <= 1 or len(tasks) <= 1:
        return [_cell_worker(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_cell_worker, tasks))


def summarize_cells(cells: list[dict]) -> list[dict]:
    """Mean +/- standard error per (axis value, controller) across seeds."""
    groups: dict[tuple, list[dict]] = {}
    for cell in cells:
        groups.setdefault((cell["axis_value"], cell["controller"]), []).append(cell)
    out = []
    for (value, name), members in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        objs = np.array([m["metrics"]["objective"] for m in members])
        ints = np.array([np.mean(m["metrics"]["interruption_prob"]) for m in members])
        ovfs = np.array([np.mean(m["metrics"]["overflow_prob"]) for m in members])
        pows = np.array([np.mean(m["metrics"]["avg_power_w"]) for m in members])
        n = len(members)
        sem = lambda x: float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        out.append(dict(
            axis_value=value, controller=name, seeds=n,
            objective_mean=float(objs.mean()), objective_sem=sem(objs),
            interruption_mean=float(ints.mean()), interruption_sem=sem(ints),
            overflow_mean=float(ovfs.mean()), overflow_sem=sem(ovfs),
            power_mean=float(pows.mean()), power_sem=sem(pows),
        ))
    return out
