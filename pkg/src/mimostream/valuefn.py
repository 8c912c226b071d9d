"""Closed-form approximate value function for the playback-queue MDP.

Each flow k gets a one-dimensional relative value function J_k whose
derivative J_k'(Q) is defined implicitly by a scalar fixed-point equation
built from the expected water-filled power and rate of its own MIMO link.
Cross-link coupling enters as a first-order perturbation with constant
coefficients E_kj.  The controller consumes only the gradient

    dV/dQ_k = J_k'(Q_k) - sum_{j != k} (L_kj + L_jk) E_kj 1{Q_k <= Q_k*, Q_j <= Q_j*}

whose negative part, scaled by W/ln2, is the per-slot rate weight.

Conventions: J' < 0 means the flow is urgent; the water level of the
single-link power allocation is -J' W / ln 2, so J' -> -inf is full urgency
and J' >= 0 switches the transmitter off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import ConfigurationError, NumericalError
from .specfun import SvCoeffs, digamma_int, gamma_term, meijer_special, sv_coeffs

LN2 = math.log(2.0)

VALUE_MODEL_SCHEMA = 1


def expected_power(coeffs: SvCoeffs, l_kk: float, w: float, jp: float) -> float:
    """Expected total transmit power of one water-filled link at slope jp.

    Closed form in incomplete-gamma terms of the threshold z = t/jp with
    t = -ln2 / (W L_kk).  Returns 0 for jp >= 0 (water level is zero).
    """
    if jp >= 0.0:
        return 0.0
    t = -LN2 / (w * l_kk)
    z = t / jp
    ratio = jp / t
    s = coeffs.s
    total = 0.0
    for p, c in enumerate(coeffs.poly):
        total += c * (ratio * gamma_term(1 + p + s, z) - gamma_term(p + s, z))
    return max(total / l_kk, 0.0)


def expected_rate(coeffs: SvCoeffs, l_kk: float, w: float, jp: float) -> float:
    """Expected total rate (bit/s) of one water-filled link at slope jp.

    Strictly decreasing in jp on (-inf, 0): a more negative slope means a
    higher water level and a higher served rate.  Returns 0 for jp >= 0.
    """
    if jp >= 0.0:
        return 0.0
    t = -LN2 / (w * l_kk)
    z = t / jp
    s = coeffs.s
    total = 0.0
    for p, c in enumerate(coeffs.poly):
        total += c * meijer_special(1 + p + s, z)
    return max(w / LN2 * total, 0.0)


def solve_lambda(coeffs: SvCoeffs, l_kk: float, w: float, mu: float) -> float:
    """Unique slope lambda < 0 with expected_rate(lambda) = mu."""
    if mu <= 0.0:
        raise ConfigurationError("playback rate must be positive")
    t = -LN2 / (w * l_kk)

    def residual(jp):
        return expected_rate(coeffs, l_kk, w, jp) - mu

    lo = hi = t  # z = 1 starting point
    for _ in range(2000):
        if residual(lo) > 0.0:
            break
        lo *= 2.0
    else:
        raise ConfigurationError("playback rate unreachable: no bracketing water level")
    for _ in range(2000):
        if residual(hi) < 0.0:
            break
        hi *= 0.5
    else:
        raise ConfigurationError("playback rate unreachable: rate does not shrink")
    lam = brentq(residual, lo, hi, xtol=1e-30, rtol=8.9e-16)
    if abs(residual(lam)) > 1e-9 * mu:
        raise NumericalError(f"rate-matching residual too large at lambda={lam}")
    return lam


def compute_c_infty(coeffs: SvCoeffs, l_kk: float, w: float, lam: float,
                    gamma: float, beta: float, eta: float,
                    q_low: float, q_high: float) -> float:
    """Optimal per-flow average cost: rate-matched power plus queue costs.

    Requires beta > c_inf for the large-queue slope to be positive; the
    caller enforces that (it is the non-degeneracy condition on the
    overflow weight).
    """
    qs = q_star(gamma, beta, eta, q_low, q_high)
    return (expected_power(coeffs, l_kk, w, lam)
            + gamma * math.exp(-eta * (qs - q_low))
            + beta * math.exp(-eta * (q_high - qs)))


def q_star(gamma: float, beta: float, eta: float, q_low: float, q_high: float) -> float:
    """Target queue level minimising the per-stage queue cost."""
    value = 0.5 * (q_low + q_high) + math.log(gamma / beta) / (2.0 * eta)
    if not (q_low < value < q_high):
        raise ConfigurationError(
            f"target queue {value} outside (Q_low, Q_high); weight condition violated"
        )
    return value


def queue_cost(gamma, beta, eta, q_low, q_high, q):
    """Smooth per-stage interruption + overflow cost at queue level q."""
    q = np.asarray(q, dtype=float)
    under = gamma * np.exp(-eta * np.maximum(q - q_low, 0.0))
    over = beta * np.exp(-eta * np.maximum(q_high - q, 0.0))
    out = under + over
    return float(out) if out.ndim == 0 else out


def perturbation_constants(coeffs: SvCoeffs, l_kk: float, w: float):
    """Constants (c1, c2, c3) of the deep-urgency expansions.

    expected_power(jp) ~ -c1 jp - c2 and expected_rate(jp) ~ c1 ln(-jp) + c3
    as jp -> -inf.  For square arrays (s = 0) the constant term of the power
    expansion diverges logarithmically; c2 is then +inf and downstream
    coupling constants are unavailable.
    """
    t = -LN2 / (w * l_kk)
    s = coeffs.s
    c1 = 0.0
    c2 = 0.0
    c3 = 0.0
    for p, c in enumerate(coeffs.poly):
        m = p + s
        c1 += c * math.factorial(m) / (-t)
        c2 = c2 + (math.inf if m == 0 else c * math.factorial(m - 1))
        c3 += c * math.factorial(m) * (-math.log(-t) + digamma_int(1 + m))
    c1 /= l_kk
    if math.isfinite(c2):
        c2 /= l_kk
    c3 *= w / LN2
    if not c1 > 0.0 or not c2 > 0.0:
        raise NumericalError(f"perturbation constants lost positivity: c1={c1}, c2={c2}")
    return c1, c2, c3


def solve_dk(c1: float, c2: float, c3: float, beta: float, mu: float, c_inf: float) -> float:
    """Deep-urgency slope D < 0 solving the small-queue asymptotic balance.

    Root of -c1 D - c2 + beta + D (c1 ln(-D) + c3 - mu) = c_inf on the
    branch left of the asymptotic rate-matching point, which is where the
    slope at an empty buffer lives.
    """
    if not math.isfinite(c2):
        raise ConfigurationError(
            "coupling constants undefined for square antenna arrays (Nt == Nr)"
        )
    if beta <= c_inf:
        raise ConfigurationError(f"beta_k > c_k_inf required (beta={beta}, c_inf={c_inf})")

    def phi(d):
        return -c1 * d - c2 + beta + d * (c1 * math.log(-d) + c3 - mu) - c_inf

    d_hat = -math.exp((mu - c3) / c1)
    if phi(d_hat) < 0.0:
        raise NumericalError("deep-urgency balance has no root on the urgent branch")
    lo = 4.0 * d_hat
    for _ in range(2000):
        if phi(lo) < 0.0:
            break
        lo *= 4.0
    else:
        raise NumericalError("deep-urgency root not bracketed after expansion")
    root = brentq(phi, lo, d_hat, xtol=1e-30, rtol=8.9e-16)
    scale = max(1.0, beta)
    if abs(phi(root)) > 1e-9 * scale:
        raise NumericalError(f"deep-urgency residual too large at D={root}")
    return root


@dataclass
class FlowValueModel:
    """Per-flow constants and the J' fixed-point solver for one pair."""

    k: int
    coeffs: SvCoeffs
    l_kk: float
    w: float
    mu: float
    gamma: float
    beta: float
    eta: float
    q_low: float
    q_high: float
    lambda_k: float
    c_inf: float
    q_star_k: float
    big_c: float
    c1: float
    c2: float
    c3: float
    d_k: float | None
    jprime_grid: np.ndarray = field(repr=False)
    jprime_vals: np.ndarray = field(repr=False)
    _interp: PchipInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        self._interp = PchipInterpolator(self.jprime_grid, self.jprime_vals, extrapolate=False)

    @property
    def t_k(self) -> float:
        return -LN2 / (self.w * self.l_kk)

    def queue_cost(self, q):
        return queue_cost(self.gamma, self.beta, self.eta, self.q_low, self.q_high, q)

    def g(self, q: float, jp: float) -> float:
        """Fixed-point residual whose root in jp defines J'(q)."""
        power = expected_power(self.coeffs, self.l_kk, self.w, jp)
        rate = expected_rate(self.coeffs, self.l_kk, self.w, jp)
        return power + self.queue_cost(q) + jp * (rate - self.mu) - self.c_inf

    def jprime(self, q):
        """Tabulated J'(q), clamped to the precomputed grid range."""
        q = np.clip(np.asarray(q, dtype=float), self.jprime_grid[0], self.jprime_grid[-1])
        out = self._interp(q)
        return float(out) if out.ndim == 0 else out


def solve_jprime(flow: FlowValueModel, q: float) -> float:
    """Exact root J'(q) of g(q, .) on the branch selected by q vs Q*.

    g is strictly increasing in jp left of lambda and strictly decreasing
    right of it, with g(q, lambda) = qc(q) - qc(Q*) >= 0, so each branch
    holds exactly one root.  Where the transmitter is off (jp >= 0) the
    equation is linear and solved in closed form.
    """
    lam = flow.lambda_k
    tol = 1e-9 * max(1.0, flow.c_inf)
    g_lam = flow.g(q, lam)
    if abs(g_lam) <= tol:
        return lam
    if g_lam < 0.0:
        raise NumericalError(f"g(q, lambda) = {g_lam} < 0; constants inconsistent")
    if q < flow.q_star_k:
        lo = 2.0 * lam
        for _ in range(2000):
            if flow.g(q, lo) < 0.0:
                break
            lo *= 4.0
        else:
            raise NumericalError(f"J'(q) not bracketed below lambda at q={q}")
        root = brentq(lambda jp: flow.g(q, jp), lo, lam, xtol=1e-30, rtol=8.9e-16)
    else:
        linear_root = (flow.queue_cost(q) - flow.c_inf) / flow.mu
        if linear_root >= 0.0:
            return linear_root
        root = brentq(lambda jp: flow.g(q, jp), lam, 0.0, xtol=1e-30, rtol=8.9e-16)
    if abs(flow.g(q, root)) > 1e-8 * max(1.0, flow.c_inf):
        raise NumericalError(f"J'(q) residual too large at q={q}")
    return root


def _jprime_grid(q_low: float, q_star_k: float, q_high: float, eta: float,
                 points: int = 512) -> np.ndarray:
    """Log-spaced queue grid with refinement around the cost transitions."""
    q_max = 4.0 * q_high
    base = np.geomspace(max(1.0, 1e-3 * q_low), q_max, points - 64)
    width = 60.0 / eta
    knots = [np.linspace(c - width, c + width, 21) for c in (q_low, q_star_k, q_high)]
    grid = np.unique(np.concatenate([[0.0, q_max], base, *knots]))
    return grid[(grid >= 0.0) & (grid <= q_max)]


def build_flow_model(config, k: int, grid_points: int = 512,
                     deep_urgency_weight: str = "overflow") -> FlowValueModel:
    """Solve every per-flow constant and tabulate J' for pair k.

    deep_urgency_weight selects which cost weight enters the small-queue
    asymptotic balance that defines D_k: "overflow" uses beta_k (the
    equation as displayed), "interruption" substitutes gamma_k (the weight
    that actually dominates the queue cost near an empty buffer).  The two
    coincide for gamma = beta.
    """
    coeffs = sv_coeffs(config.nt, config.nr)
    l_kk = float(config.L[k, k])
    w = config.bandwidth_hz
    mu = float(config.mu[k])
    gamma = float(config.gamma[k])
    beta = float(config.beta[k])
    qs = q_star(gamma, beta, config.eta, config.q_low, config.q_high)
    lam = solve_lambda(coeffs, l_kk, w, mu)
    c_inf = compute_c_infty(coeffs, l_kk, w, lam, gamma, beta, config.eta,
                            config.q_low, config.q_high)
    if beta <= c_inf:
        raise ConfigurationError(
            f"beta_k > c_k_inf required for pair {k} (beta={beta}, c_inf={c_inf:.6g}); "
            f"raise the overflow weight or improve the link"
        )
    if deep_urgency_weight not in ("overflow", "interruption"):
        raise ConfigurationError(
            f"deep_urgency_weight must be 'overflow' or 'interruption', "
            f"got {deep_urgency_weight!r}"
        )
    dk_weight = beta if deep_urgency_weight == "overflow" else gamma
    c1, c2, c3 = perturbation_constants(coeffs, l_kk, w)
    d_k = solve_dk(c1, c2, c3, dk_weight, mu, c_inf) if math.isfinite(c2) else None
    flow = FlowValueModel(
        k=k, coeffs=coeffs, l_kk=l_kk, w=w, mu=mu, gamma=gamma, beta=beta,
        eta=config.eta, q_low=config.q_low, q_high=config.q_high,
        lambda_k=lam, c_inf=c_inf, q_star_k=qs, big_c=(beta - c_inf) / mu,
        c1=c1, c2=c2, c3=c3, d_k=d_k,
        jprime_grid=np.array([0.0, 1.0]), jprime_vals=np.array([0.0, 0.0]),
    )
    grid = _jprime_grid(config.q_low, qs, config.q_high, config.eta, grid_points)
    vals = np.array([solve_jprime(flow, q) for q in grid])
    vals = np.maximum.accumulate(vals)  # guard roundoff wiggle on the plateaus
    flow.jprime_grid = grid
    flow.jprime_vals = vals
    flow._interp = PchipInterpolator(grid, vals, extrapolate=False)
    return flow


def coupling_coefficient(flow_k: FlowValueModel, flow_j: FlowValueModel, d: int,
                         w: float) -> float:
    """First-order sensitivity E_kj of flow k's value to the (k, j) cross gain."""
    if flow_k.d_k is None or flow_j.d_k is None:
        raise ConfigurationError(
            "coupling constants unavailable (square antenna array); "
            "cannot build a multi-pair value model"
        )
    den = flow_k.mu - flow_k.c1 * math.log(-flow_k.d_k) - flow_k.c3
    if abs(den) < 1e-12 * flow_k.mu:
        raise ConfigurationError("degenerate coupling: vanishing denominator")
    if den > 0.0:
        raise NumericalError(
            "coupling denominator should be negative (deep-urgency rate exceeds mu)"
        )
    num = LN2 * (flow_k.c1 * flow_k.d_k + flow_k.c2) * (flow_j.c1 * flow_j.d_k + flow_j.c2)
    return num / (2.0 * d * w * den)


@dataclass
class ValueModel:
    """Precomputed value-function model shared read-only by the controllers.

    ``jprime_vec`` runs on a dense uniform resample of the per-flow
    monotone-cubic tables so a K-vector lookup is a handful of array ops;
    the controller queries it every slot.
    """

    flows: list[FlowValueModel]
    E: np.ndarray
    L: np.ndarray
    config_hash: str = ""
    _dense_vals: np.ndarray = field(init=False, repr=False)
    _dense_step: float = field(init=False, repr=False)
    _dense_max: float = field(init=False, repr=False)
    _q_star: np.ndarray = field(init=False, repr=False)
    _coup: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = 4096
        self._dense_max = min(f.jprime_grid[-1] for f in self.flows)
        self._dense_step = self._dense_max / n
        grid = np.linspace(0.0, self._dense_max, n + 1)
        self._dense_vals = np.stack([f.jprime(grid) for f in self.flows])
        self._q_star = np.array([f.q_star_k for f in self.flows])
        coup = (self.L + self.L.T) * self.E
        np.fill_diagonal(coup, 0.0)
        self._coup = coup

    @property
    def K(self) -> int:
        return len(self.flows)

    def q_star_vec(self) -> np.ndarray:
        return self._q_star

    def jprime_vec(self, q: np.ndarray) -> np.ndarray:
        q = np.minimum(np.maximum(np.asarray(q, dtype=float), 0.0), self._dense_max)
        pos = q / self._dense_step
        idx = np.minimum(pos.astype(int), self._dense_vals.shape[1] - 2)
        frac = pos - idx
        rows = np.arange(len(self.flows))
        lo = self._dense_vals[rows, idx]
        hi = self._dense_vals[rows, idx + 1]
        return lo + frac * (hi - lo)


def build_value_model(config, grid_points: int = 512,
                      deep_urgency_weight: str = "overflow") -> ValueModel:
    flows = [build_flow_model(config, k, grid_points, deep_urgency_weight)
             for k in range(config.K)]
    k_pairs = config.K
    e_mat = np.zeros((k_pairs, k_pairs))
    if k_pairs > 1:
        for k in range(k_pairs):
            for j in range(k_pairs):
                if j != k:
                    e_mat[k, j] = coupling_coefficient(
                        flows[k], flows[j], config.d, config.bandwidth_hz
                    )
    return ValueModel(flows=flows, E=e_mat, L=np.array(config.L),
                      config_hash=config.config_hash())


def value_gradient(model: ValueModel, q: np.ndarray) -> np.ndarray:
    """Gradient of the approximate value function at the queue vector q.

    The coupling term is active only while both queues sit at or below
    their targets (the boundary itself counts as active).
    """
    q = np.asarray(q, dtype=float)
    jp = model.jprime_vec(q)
    below = q <= model._q_star
    coup = (model._coup * np.outer(below, below)).sum(axis=1)
    return jp - coup


def value_model_to_dict(model: ValueModel) -> dict:
    return {
        "schema_version": VALUE_MODEL_SCHEMA,
        "config_hash": model.config_hash,
        "L": model.L.tolist(),
        "E": model.E.tolist(),
        "flows": [
            {
                "k": f.k,
                "antennas": {"d": f.coeffs.d, "b": f.coeffs.b},
                "l_kk": f.l_kk,
                "bandwidth_hz": f.w,
                "mu": f.mu,
                "gamma": f.gamma,
                "beta": f.beta,
                "eta": f.eta,
                "q_low": f.q_low,
                "q_high": f.q_high,
                "lambda_k": f.lambda_k,
                "c_inf": f.c_inf,
                "q_star": f.q_star_k,
                "big_c": f.big_c,
                "c1": f.c1,
                "c2": f.c2 if math.isfinite(f.c2) else None,
                "c3": f.c3,
                "d_k": f.d_k,
                "jprime_grid": f.jprime_grid.tolist(),
                "jprime_vals": f.jprime_vals.tolist(),
            }
            for f in model.flows
        ],
    }


def value_model_from_dict(data: dict) -> ValueModel:
    if data.get("schema_version") != VALUE_MODEL_SCHEMA:
        raise ConfigurationError(
            f"unsupported value-model schema {data.get('schema_version')}"
        )
    flows = []
    for fd in data["flows"]:
        coeffs = sv_coeffs(fd["antennas"]["b"], fd["antennas"]["d"])
        flows.append(
            FlowValueModel(
                k=fd["k"], coeffs=coeffs, l_kk=fd["l_kk"], w=fd["bandwidth_hz"],
                mu=fd["mu"], gamma=fd["gamma"], beta=fd["beta"], eta=fd["eta"],
                q_low=fd["q_low"], q_high=fd["q_high"], lambda_k=fd["lambda_k"],
                c_inf=fd["c_inf"], q_star_k=fd["q_star"], big_c=fd["big_c"],
                c1=fd["c1"], c2=fd["c2"] if fd["c2"] is not None else math.inf,
                c3=fd["c3"], d_k=fd["d_k"],
                jprime_grid=np.asarray(fd["jprime_grid"]),
                jprime_vals=np.asarray(fd["jprime_vals"]),
            )
        )
    return ValueModel(
        flows=flows,
        E=np.asarray(data["E"], dtype=float),
        L=np.asarray(data["L"], dtype=float),
        config_hash=data.get("config_hash", ""),
    )
