"""Fading generation and physical-layer computations for the K-pair network.

Conventions used throughout the package:

  * ``H`` is a complex array of shape (K, K, Nr, Nt); ``H[k, j]`` is the
    short-term fading from transmitter j to receiver k, entries CN(0, 1).
  * ``F`` is a stacked precoder array of shape (K, Nt, d); ``U`` a stacked
    decorrelator array of shape (K, Nr, d).  A silenced pair carries
    all-zero matrices.
  * The post-combining noise covariance is U_k^H U_k.  With the MMSE
    decorrelator this makes the achieved rate equal the receiver-free
    log-det form, which the per-pair rate expression requires.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError

LN2 = math.log(2.0)


def sample_channel(rng: np.random.Generator, config) -> np.ndarray:
    """Draw one slot of i.i.d. CN(0, 1) fading for all K*K links."""
    shape = (config.K, config.K, config.nr, config.nt)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return (re + 1j * im) / np.sqrt(2.0)


def friis_cross_gain(gr: float, gt: float, wavelength: float, distance: float) -> float:
    """Worst-case cross path gain Gr*Gt*(lambda/4pi)^2 / delta^4 (linear)."""
    if min(gr, gt, wavelength, distance) <= 0.0:
        raise ConfigurationError("friis_cross_gain arguments must be positive")
    return gr * gt * (wavelength / (4.0 * math.pi)) ** 2 / distance**4


def transmit_power(f_k: np.ndarray) -> float:
    """Tr(F_k F_k^H): squared Frobenius norm of the precoder."""
    return float(np.sum(np.abs(f_k) ** 2))


def _psd_logdet_rate(signal: np.ndarray, noise: np.ndarray, zeta: float) -> float:
    """log2 det(I + zeta * signal * noise^{-1}) on the range of ``noise``.

    Both arguments are Hermitian PSD with null(noise) contained in
    null(signal), so restricting to the non-null eigenspace is exact.
    """
    evals, vecs = np.linalg.eigh(noise)
    keep = evals > max(evals[-1], 1.0) * 1e-14
    if not np.any(keep):
        return 0.0
    white = vecs[:, keep] / np.sqrt(evals[keep])
    m = white.conj().T @ signal @ white
    lam = np.linalg.eigvalsh((m + m.conj().T) / 2.0)
    return float(np.sum(np.log2(np.maximum(1.0 + zeta * lam, 1.0))))


def rate(H: np.ndarray, config, F: np.ndarray, u_k: np.ndarray, k: int) -> float:
    """Achievable rate (bit/s) of pair k, treating interference as noise."""
    f_k = F[k]
    if not np.any(f_k) or not np.any(u_k):
        return 0.0
    L = config.L
    g = u_k.conj().T @ H[k, k] @ f_k
    signal = L[k, k] * (g @ g.conj().T)
    noise = u_k.conj().T @ u_k
    for j in range(config.K):
        if j != k and np.any(F[j]):
            c = u_k.conj().T @ H[k, j] @ F[j]
            noise = noise + L[k, j] * (c @ c.conj().T)
    return config.bandwidth_hz * _psd_logdet_rate(signal, noise, config.zeta)


def rate_receiver_free(H: np.ndarray, config, F: np.ndarray, k: int) -> float:
    """Rate of pair k under the optimal MMSE decorrelator, in closed form.

    Equals rate(H, config, F, mmse_receiver(...), k) when zeta = 1; used as
    the fast path in the simulator and as a consistency anchor in tests.
    """
    f_k = F[k]
    if not np.any(f_k):
        return 0.0
    L = config.L
    nr = config.nr
    g = H[k, k] @ f_k
    signal = L[k, k] * (g @ g.conj().T)
    noise = np.eye(nr, dtype=complex)
    for j in range(config.K):
        if j != k and np.any(F[j]):
            c = H[k, j] @ F[j]
            noise = noise + L[k, j] * (c @ c.conj().T)
    return config.bandwidth_hz * _psd_logdet_rate(signal, noise, config.zeta)


def interference_covariance(H: np.ndarray, config, F: np.ndarray, k: int) -> np.ndarray:
    """J_k(F) = sum_j L_kj H_kj F_j F_j^H H_kj^H + I (signal included)."""
    cov = np.eye(config.nr, dtype=complex)
    for j in range(config.K):
        if np.any(F[j]):
            c = H[k, j] @ F[j]
            cov = cov + config.L[k, j] * (c @ c.conj().T)
    return cov


def mmse_receiver(H: np.ndarray, config, F: np.ndarray, k: int) -> np.ndarray:
    """MMSE decorrelator U_k = J_k^{-1} sqrt(L_kk) H_kk F_k.

    The sqrt(L_kk) scaling follows the iterative-update convention; any
    per-pair positive rescaling leaves the achieved rate unchanged.
    """
    f_k = F[k]
    if not np.any(f_k):
        return np.zeros((config.nr, config.d), dtype=complex)
    cov = interference_covariance(H, config, F, k)
    return np.linalg.solve(cov, math.sqrt(config.L[k, k]) * (H[k, k] @ f_k))


def mmse_receivers(H: np.ndarray, config, F: np.ndarray) -> np.ndarray:
    """Stacked MMSE decorrelators for all pairs."""
    return np.stack([mmse_receiver(H, config, F, k) for k in range(config.K)])
