"""Per-slot precoder/decorrelator policies.

The proposed controller turns the value-function gradient into per-pair rate
weights and solves a weighted sum-MSE minimisation by block-coordinate
descent: receiver update, MSE-weight update, precoder update, each a closed
form.  Pairs with a non-negative gradient component are silenced for the
slot.  The CSI-only and queue-weighted baselines reuse the same solver with
their own weight rules; zero-forcing is a direct construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import channel, kernels
from .errors import ConfigurationError, NumericalError

LN2 = math.log(2.0)


@dataclass(frozen=True)
class WmmseOptions:
    max_iters: int = 100
    obj_tol: float = 1e-6
    init_scheme: str = "matched-filter-scaled"
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.obj_tol <= 0:
            raise ConfigurationError("obj_tol must be positive")
        if self.init_scheme not in ("matched-filter-scaled", "random-seeded"):
            raise ConfigurationError(f"unknown init_scheme {self.init_scheme!r}")


@dataclass
class SlotDecision:
    """Outcome of one slot's transceiver optimisation.

    ``rates`` caches the per-pair achieved rates (bit/s) of (F, U) so the
    simulator does not recompute them; None means not yet evaluated.
    """

    F: np.ndarray
    U: np.ndarray
    active: np.ndarray
    iters_used: int = 0
    final_objective: float = 0.0
    surrogate_trace: list = field(default_factory=list)
    rates: np.ndarray | None = None


def active_set(grad: np.ndarray) -> np.ndarray:
    """Indices of pairs with a strictly negative gradient component."""
    return np.flatnonzero(np.asarray(grad) < 0.0)


def waterfill_powers(sv_sq: np.ndarray, l_kk: float, level: float) -> np.ndarray:
    """Per-stream powers (level - 1/(L sigma_i^2))^+ at the given water level."""
    with np.errstate(divide="ignore"):
        floor = 1.0 / (l_kk * sv_sq)
    return np.maximum(level - floor, 0.0)


def single_user_waterfill(h_kk: np.ndarray, l_kk: float, level: float) -> np.ndarray:
    """Closed-form optimal precoder of an isolated link at a given water level.

    Beams are the d dominant right singular vectors of the channel; powers
    water-fill against the inverse eigen-gains.
    """
    nr, nt = h_kk.shape
    d = min(nt, nr)
    if level <= 0.0:
        return np.zeros((nt, d), dtype=complex)
    _, sv, vh = np.linalg.svd(h_kk)
    powers = waterfill_powers(sv[:d] ** 2, l_kk, level)
    return vh[:d].conj().T * np.sqrt(powers)


def wmmse_objective(H: np.ndarray, config, grad: np.ndarray, F: np.ndarray) -> float:
    """Sum of transmit powers plus gradient-weighted MMSE-receiver rates."""
    total = 0.0
    for k in range(config.K):
        u_k = channel.mmse_receiver(H, config, F, k)
        total += channel.transmit_power(F[k]) + grad[k] * channel.rate(H, config, F, u_k, k)
    return total


def _init_precoders(hs: np.ndarray, ls: np.ndarray, weights: np.ndarray, d: int,
                    scheme: str, rng_seed: int) -> np.ndarray:
    """Water-filled matched-filter initialisation, optionally perturbed.

    A pair whose water level is below every inverse eigen-gain would start at
    exactly zero, which is a fixed point of the iteration; such pairs get a
    unit-power dominant beam instead so the descent can decide their fate.
    """
    m = hs.shape[0]
    nt = hs.shape[3]
    F = np.zeros((m, nt, d), dtype=complex)
    for k in range(m):
        _, sv, vh = np.linalg.svd(hs[k, k])
        powers = waterfill_powers(sv[:d] ** 2, ls[k, k], weights[k])
        if not np.any(powers > 0.0):
            powers = np.zeros(d)
            powers[0] = 1.0
        F[k] = vh[:d].conj().T * np.sqrt(powers)
    if scheme == "random-seeded":
        rng = np.random.default_rng(rng_seed)
        noise = rng.standard_normal(F.shape) + 1j * rng.standard_normal(F.shape)
        F = F + 0.1 * math.sqrt(np.mean(np.abs(F) ** 2)) * noise
    return F


def _receiver_step(hs, ls, F):
    """MMSE receivers for all active pairs given the current precoders."""
    nr = hs.shape[2]
    g = np.einsum("kjab,jbc->kjac", hs, F)
    g_diag = g[np.arange(g.shape[0]), np.arange(g.shape[0])]
    cov = np.einsum("kj,kjad,kjbd->kab", ls, g, g.conj())
    cov += np.eye(nr)[None]
    sqrt_ld = np.sqrt(np.diagonal(ls))[:, None, None]
    receivers = np.linalg.solve(cov, sqrt_ld * g_diag)
    return g, g_diag, receivers


def _wmmse_iterate_numpy(hs, ls, weights, F, max_iters, obj_tol):
    """Reference einsum implementation of the block-coordinate iteration."""
    m, _, _, nt = hs.shape
    d = F.shape[2]
    sqrt_ld = np.sqrt(np.diagonal(ls))
    eye_d = np.eye(d)[None]
    diag = np.arange(m)
    trace: list[float] = []
    prev = math.inf
    iters = 0
    rates = np.zeros(m)
    receivers = None
    converged = False
    for iters in range(1, max_iters + 1):
        g, g_diag, receivers = _receiver_step(hs, ls, F)
        mse_min = eye_d - sqrt_ld[:, None, None] * np.einsum(
            "kai,kaj->kij", receivers.conj(), g_diag
        )
        z = np.linalg.inv(mse_min)
        _, logdet_z = np.linalg.slogdet(z)
        rates = logdet_z / LN2
        surrogate = float(np.sum(np.abs(F) ** 2) + np.sum(weights * (d - logdet_z)))
        trace.append(surrogate)
        if abs(prev - surrogate) <= obj_tol * max(1.0, abs(surrogate)):
            converged = True
            break
        prev = surrogate
        w_rx = weights[:, None, None] * np.einsum(
            "kai,kij,kbj->kab", receivers, z, receivers.conj()
        )
        leak = np.einsum("jab,jkbl->jkal", w_rx, hs)
        quad = np.einsum("jk,jkai,jkal->kil", ls, hs.conj(), leak)
        quad += np.eye(nt)[None]
        rhs = sqrt_ld[:, None, None] * np.einsum(
            "kai,kad->kid", hs[diag, diag].conj(), receivers
        )
        F = weights[:, None, None] * np.linalg.solve(quad, rhs @ z)
    if not converged:
        g, g_diag, receivers = _receiver_step(hs, ls, F)
        mse_min = eye_d - sqrt_ld[:, None, None] * np.einsum(
            "kai,kaj->kij", receivers.conj(), g_diag
        )
        _, logdet = np.linalg.slogdet(np.linalg.inv(mse_min))
        rates = logdet / LN2
    return F, receivers, iters, trace, rates


def wmmse_solve(H: np.ndarray, config, grad: np.ndarray,
                opts: WmmseOptions | None = None,
                use_kernel: bool | None = None) -> SlotDecision:
    """Block-coordinate WMMSE solve restricted to the active set.

    The recorded surrogate trace is evaluated once per iteration after the
    receiver/weight updates; every block update is an exact coordinate
    minimiser, so the trace is non-increasing up to roundoff.  Dispatches to
    the compiled kernel when available; both paths implement the same
    updates and are pinned against each other in the tests.
    """
    opts = opts or WmmseOptions()
    grad = np.asarray(grad, dtype=float)
    K, nt, nr, d = config.K, config.nt, config.nr, config.d
    F_full = np.zeros((K, nt, d), dtype=complex)
    U_full = np.zeros((K, nr, d), dtype=complex)
    act = active_set(grad)
    if act.size == 0:
        return SlotDecision(F=F_full, U=U_full, active=act,
                            rates=np.zeros(K))

    weights = -grad[act] * config.bandwidth_hz / LN2
    hs = np.ascontiguousarray(H[np.ix_(act, act)])
    ls = np.ascontiguousarray(config.L[np.ix_(act, act)])
    if use_kernel is None:
        use_kernel = kernels.HAVE_NUMBA
    if use_kernel and kernels.HAVE_NUMBA and opts.init_scheme == "matched-filter-scaled":
        f0 = kernels.init_waterfill(hs, ls, weights, d)
    else:
        f0 = _init_precoders(hs, ls, weights, d, opts.init_scheme, opts.rng_seed)
    try:
        if use_kernel and kernels.HAVE_NUMBA:
            F, receivers, iters, tr, n_tr, rates_l2 = kernels.wmmse_iterate(
                hs, ls, weights, f0, opts.max_iters, opts.obj_tol
            )
            trace = list(tr[:n_tr])
        else:
            F, receivers, iters, trace, rates_l2 = _wmmse_iterate_numpy(
                hs, ls, weights, f0, opts.max_iters, opts.obj_tol
            )
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"WMMSE linear algebra failure: {exc}") from exc
    if not (np.all(np.isfinite(F.view(float))) and np.all(np.isfinite(receivers.view(float)))):
        raise NumericalError(
            f"WMMSE produced non-finite precoders (active set {act.tolist()})"
        )

    F_full[act] = F
    U_full[act] = receivers
    rates = np.zeros(K)
    if config.zeta == 1.0:
        rates[act] = config.bandwidth_hz * rates_l2
    else:
        for k in act:
            rates[k] = channel.rate(H, config, F_full, U_full[k], k)
    objective = float(np.sum(np.abs(F_full) ** 2) + np.dot(grad, rates))
    return SlotDecision(F=F_full, U=U_full, active=act, iters_used=int(iters),
                        final_objective=objective, surrogate_trace=trace,
                        rates=rates)


def zfp_precoder(H: np.ndarray, config, power_per_pair: float) -> np.ndarray:
    """Zero-forcing precoders: null the cross links, then beam on the rest.

    When the stacked cross-channel rows span the whole transmit space (more
    interfered antennas than transmit antennas) exact nulling is impossible;
    the precoder then falls back to the least-leakage direction, the right
    singular vector of the stacked cross channel with the smallest singular
    value.  Power is split equally over the surviving streams.
    """
    if config.nt < config.K:
        raise ConfigurationError("zero-forcing needs Nt >= K")
    K, nt, d = config.K, config.nt, config.d
    F = np.zeros((K, nt, d), dtype=complex)
    for k in range(K):
        rows = [H[j, k] for j in range(K) if j != k]
        if rows:
            stacked = np.vstack(rows)
            _, sv, vh = np.linalg.svd(stacked)
            rank = int(np.sum(sv > sv[0] * 1e-12)) if sv.size else 0
            if rank < nt:
                basis = vh[rank:].conj().T
            else:
                basis = vh[-1:].conj().T
        else:
            basis = np.eye(nt, dtype=complex)
        heff = H[k, k] @ basis
        _, _, veff = np.linalg.svd(heff)
        n_streams = min(d, basis.shape[1])
        beams = basis @ veff[:n_streams].conj().T
        F[k, :, :n_streams] = beams * math.sqrt(power_per_pair / n_streams)
    return F


def cop_precoder(H: np.ndarray, config, alpha: float,
                 opts: WmmseOptions | None = None) -> SlotDecision:
    """CSI-only precoding: uniform rate weight alpha, blind to the queues."""
    if alpha <= 0.0:
        raise ConfigurationError("cop alpha must be positive")
    grad = np.full(config.K, -alpha * LN2 / config.bandwidth_hz)
    return wmmse_solve(H, config, grad, opts)


def qwp_precoder(H: np.ndarray, config, q: np.ndarray, alpha: float,
                 opts: WmmseOptions | None = None) -> SlotDecision:
    """Queue-weighted precoding: rate weight alpha [Q_high - Q_k]^+ per pair."""
    if alpha <= 0.0:
        raise ConfigurationError("qwp alpha must be positive")
    slack = np.maximum(config.q_high - np.asarray(q, dtype=float), 0.0)
    grad = -alpha * slack * LN2 / config.bandwidth_hz
    return wmmse_solve(H, config, grad, opts)
