"""Compiled inner loops for the per-slot transceiver solves.

The WMMSE iteration works on matrices no larger than Nt x Nt (5x5 at paper
scale), so both pure numpy and naive numba-with-LAPACK spend their time in
per-call overhead rather than arithmetic.  These kernels hand-roll the few
linear-algebra primitives they need (Cholesky factor/solve on Hermitian
positive-definite systems, small matrix products) as explicit loops, which
numba compiles to tight code.  control.wmmse_solve dispatches here when
numba is importable; the einsum implementation in control.py is the
reference and the unit tests pin the two paths against each other.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap(args[0]) if args and callable(args[0]) else wrap

LN2 = np.log(2.0)


@njit(cache=True, inline="always")
def _chol(a, lower):
    """In-place-style Cholesky a = L L^H for Hermitian PD a; returns logdet(a)."""
    n = a.shape[0]
    logdet = 0.0
    for i in range(n):
        for j in range(n):
            lower[i, j] = 0.0
    for i in range(n):
        acc = a[i, i].real
        for p in range(i):
            acc -= (lower[i, p] * np.conj(lower[i, p])).real
        diag = np.sqrt(acc)
        lower[i, i] = diag
        logdet += 2.0 * np.log(diag)
        for j in range(i + 1, n):
            s = a[j, i]
            for p in range(i):
                s -= lower[j, p] * np.conj(lower[i, p])
            lower[j, i] = s / diag
    return logdet


@njit(cache=True, inline="always")
def _chol_solve(lower, b, x):
    """Solve (L L^H) x = b for matrix b, overwriting x."""
    n = lower.shape[0]
    m = b.shape[1]
    for c in range(m):
        for i in range(n):
            s = b[i, c]
            for p in range(i):
                s -= lower[i, p] * x[p, c]
            x[i, c] = s / lower[i, i]
        for i in range(n - 1, -1, -1):
            s = x[i, c]
            for p in range(i + 1, n):
                s -= np.conj(lower[p, i]) * x[p, c]
            x[i, c] = s / lower[i, i]


@njit(cache=True)
def wmmse_iterate(hs, ls, weights, f0, max_iters, obj_tol):
    """Block-coordinate WMMSE on the active sub-network.

    Returns (F, U, iters, trace, n_trace, rates); rates are per-pair
    spectral efficiencies in bit/s/Hz of the returned (F, U) point under
    the capacity-achieving MCS.
    """
    m, _, nr, nt = hs.shape
    d = f0.shape[2]
    F = f0.copy()
    U = np.zeros((m, nr, d), dtype=np.complex128)
    G = np.zeros((m, m, nr, d), dtype=np.complex128)
    Z = np.zeros((m, d, d), dtype=np.complex128)
    w_rx = np.zeros((m, nr, nr), dtype=np.complex128)
    cov = np.zeros((nr, nr), dtype=np.complex128)
    low_r = np.zeros((nr, nr), dtype=np.complex128)
    e_min = np.zeros((d, d), dtype=np.complex128)
    low_d = np.zeros((d, d), dtype=np.complex128)
    quad = np.zeros((nt, nt), dtype=np.complex128)
    low_t = np.zeros((nt, nt), dtype=np.complex128)
    rhs = np.zeros((nt, d), dtype=np.complex128)
    tmp_nd = np.zeros((nr, d), dtype=np.complex128)
    row_r = np.zeros(nr, dtype=np.complex128)
    eye_d = np.eye(d).astype(np.complex128)
    trace = np.zeros(max_iters)
    rates = np.zeros(m)
    sqrt_ld = np.sqrt(np.diag(ls))
    prev = np.inf
    iters = 0
    n_trace = 0
    for it in range(max_iters):
        iters = it + 1
        surrogate = 0.0
        for k in range(m):
            # G[k, j] = hs[k, j] @ F[j]; cov = sum_j ls[k, j] G G^H + I
            for i in range(nr):
                for jc in range(nr):
                    cov[i, jc] = 1.0 + 0.0j if i == jc else 0.0 + 0.0j
            for j in range(m):
                for a in range(nr):
                    for c in range(d):
                        s = 0.0 + 0.0j
                        for b in range(nt):
                            s += hs[k, j, a, b] * F[j, b, c]
                        G[k, j, a, c] = s
                lkj = ls[k, j]
                for a in range(nr):
                    for b in range(nr):
                        s = 0.0 + 0.0j
                        for c in range(d):
                            s += G[k, j, a, c] * np.conj(G[k, j, b, c])
                        cov[a, b] += lkj * s
            _chol(cov, low_r)
            for a in range(nr):
                for c in range(d):
                    tmp_nd[a, c] = sqrt_ld[k] * G[k, k, a, c]
            _chol_solve(low_r, tmp_nd, U[k])
            # e_min = I - sqrt(L_kk) U^H G_kk, symmetrised for the factorisation
            for i in range(d):
                for jc in range(d):
                    s = 0.0 + 0.0j
                    for a in range(nr):
                        s += np.conj(U[k, a, i]) * G[k, k, a, jc]
                    e_min[i, jc] = (1.0 + 0.0j if i == jc else 0.0 + 0.0j) - sqrt_ld[k] * s
            for i in range(d):
                for jc in range(i + 1, d):
                    h = 0.5 * (e_min[i, jc] + np.conj(e_min[jc, i]))
                    e_min[i, jc] = h
                    e_min[jc, i] = np.conj(h)
                e_min[i, i] = e_min[i, i].real + 0.0j
            logdet_e = _chol(e_min, low_d)
            _chol_solve(low_d, eye_d, Z[k])
            rates[k] = -logdet_e / LN2
            power = 0.0
            for b in range(nt):
                for c in range(d):
                    power += (F[k, b, c] * np.conj(F[k, b, c])).real
            surrogate += power + weights[k] * (d + logdet_e)
        trace[n_trace] = surrogate
        n_trace += 1
        if abs(prev - surrogate) <= obj_tol * max(1.0, abs(surrogate)):
            break
        prev = surrogate
        # w_rx[j] = w_j U_j Z_j U_j^H
        for j in range(m):
            for a in range(nr):
                for c in range(d):
                    s = 0.0 + 0.0j
                    for p in range(d):
                        s += U[j, a, p] * Z[j, p, c]
                    tmp_nd[a, c] = s
            for a in range(nr):
                for b in range(nr):
                    s = 0.0 + 0.0j
                    for c in range(d):
                        s += tmp_nd[a, c] * np.conj(U[j, b, c])
                    w_rx[j, a, b] = weights[j] * s
        # F[k] = w_k quad^{-1} sqrt(L_kk) hs_kk^H U_k Z_k
        for k in range(m):
            for i in range(nt):
                for jc in range(nt):
                    quad[i, jc] = 1.0 + 0.0j if i == jc else 0.0 + 0.0j
            for j in range(m):
                ljk = ls[j, k]
                for i in range(nt):
                    for b in range(nr):
                        s = 0.0 + 0.0j
                        for a in range(nr):
                            s += np.conj(hs[j, k, a, i]) * w_rx[j, a, b]
                        row_r[b] = s
                    for jc in range(nt):
                        s = 0.0 + 0.0j
                        for b in range(nr):
                            s += row_r[b] * hs[j, k, b, jc]
                        quad[i, jc] += ljk * s
            for i in range(nt):
                for jc in range(i + 1, nt):
                    h = 0.5 * (quad[i, jc] + np.conj(quad[jc, i]))
                    quad[i, jc] = h
                    quad[jc, i] = np.conj(h)
                quad[i, i] = quad[i, i].real + 0.0j
            for i in range(nt):
                for c in range(d):
                    s = 0.0 + 0.0j
                    for a in range(nr):
                        for p in range(d):
                            s += np.conj(hs[k, k, a, i]) * U[k, a, p] * Z[k, p, c]
                    rhs[i, c] = sqrt_ld[k] * s
            _chol(quad, low_t)
            _chol_solve(low_t, rhs, F[k])
            for i in range(nt):
                for c in range(d):
                    F[k, i, c] *= weights[k]
    else:
        # horizon exhausted: refresh receivers and rates for the final F
        for k in range(m):
            for i in range(nr):
                for jc in range(nr):
                    cov[i, jc] = 1.0 + 0.0j if i == jc else 0.0 + 0.0j
            for j in range(m):
                for a in range(nr):
                    for c in range(d):
                        s = 0.0 + 0.0j
                        for b in range(nt):
                            s += hs[k, j, a, b] * F[j, b, c]
                        G[k, j, a, c] = s
                lkj = ls[k, j]
                for a in range(nr):
                    for b in range(nr):
                        s = 0.0 + 0.0j
                        for c in range(d):
                            s += G[k, j, a, c] * np.conj(G[k, j, b, c])
                        cov[a, b] += lkj * s
            _chol(cov, low_r)
            for a in range(nr):
                for c in range(d):
                    tmp_nd[a, c] = sqrt_ld[k] * G[k, k, a, c]
            _chol_solve(low_r, tmp_nd, U[k])
            for i in range(d):
                for jc in range(d):
                    s = 0.0 + 0.0j
                    for a in range(nr):
                        s += np.conj(U[k, a, i]) * G[k, k, a, jc]
                    e_min[i, jc] = (1.0 + 0.0j if i == jc else 0.0 + 0.0j) - sqrt_ld[k] * s
            for i in range(d):
                for jc in range(i + 1, d):
                    h = 0.5 * (e_min[i, jc] + np.conj(e_min[jc, i]))
                    e_min[i, jc] = h
                    e_min[jc, i] = np.conj(h)
                e_min[i, i] = e_min[i, i].real + 0.0j
            rates[k] = -_chol(e_min, low_d) / LN2
    return F, U, iters, trace, n_trace, rates


@njit(cache=True)
def init_waterfill(hs, ls, weights, d):
    """Per-pair water-filled dominant-beam initial precoders.

    Pairs whose water level lies below every inverse eigen-gain get a unit
    power dominant beam instead of the all-zero fixed point.
    """
    m = hs.shape[0]
    nt = hs.shape[3]
    F = np.zeros((m, nt, d), dtype=np.complex128)
    for k in range(m):
        _, sv, vh = np.linalg.svd(hs[k, k])
        any_power = False
        for i in range(d):
            p = weights[k] - 1.0 / (ls[k, k] * sv[i] * sv[i])
            if p > 0.0:
                any_power = True
                for a in range(nt):
                    F[k, a, i] = np.conj(vh[i, a]) * np.sqrt(p)
        if not any_power:
            for a in range(nt):
                F[k, a, 0] = np.conj(vh[0, a])
    return F


@njit(cache=True)
def mmse_rates(hs, ls, F, zeta):
    """MMSE receivers and achieved rates (bit/s/Hz) for fixed precoders."""
    m = hs.shape[0]
    nr = hs.shape[2]
    d = F.shape[2]
    U = np.zeros((m, nr, d), dtype=np.complex128)
    rates = np.zeros(m)
    sqrt_ld = np.sqrt(np.diag(ls))
    for k in range(m):
        active = False
        for j in range(d):
            if np.abs(F[k, :, j]).sum() > 0.0:
                active = True
        if not active:
            continue
        g_kk = hs[k, k] @ F[k]
        noise = np.eye(nr).astype(np.complex128)
        for j in range(m):
            if j != k:
                g = hs[k, j] @ F[j]
                noise += ls[k, j] * (g @ np.conj(g.T))
        cov = noise + ls[k, k] * (g_kk @ np.conj(g_kk.T))
        U[k] = np.linalg.solve(cov, sqrt_ld[k] * g_kk)
        white = np.linalg.solve(noise, g_kk)
        lam = np.real(np.linalg.eigvals(np.conj(g_kk.T).copy() @ white))
        for i in range(lam.shape[0]):
            if lam[i] > 0.0:
                rates[k] += np.log2(1.0 + zeta * ls[k, k] * lam[i])
    return U, rates
