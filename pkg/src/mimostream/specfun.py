"""Special functions and the MIMO singular-value distribution.

The closed-form expressions for expected water-filling power and rate are
built from three ingredients: the upper incomplete gamma function at integer
order, the integer digamma function, and the log-weighted tail integral

    M(N, z) = int_z^inf ln(x/z) x^(N-1) e^(-x) dx,   z > 0,

which reduces to the exponential integral E1(z) at N = 1 and satisfies the
recursion M(N, z) = (N-1) M(N-1, z) + Gamma(N-1, z).  All three adopt the
convention that a non-positive argument yields 0, matching the truncation of
the water-filling integrands at the transmission threshold.

The squared singular values of an i.i.d. complex Gaussian Nr x Nt matrix have
a density expressible as a polynomial times x^s e^(-x), s = |Nt - Nr|.  The
polynomial coefficients are assembled here once per antenna geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import exp1

from .errors import ConfigurationError

EULER_GAMMA = 0.5772156649015328606

__all__ = [
    "EULER_GAMMA",
    "SvCoeffs",
    "upper_incomplete_gamma",
    "gamma_term",
    "digamma_int",
    "meijer_special",
    "sv_coeffs",
    "sv_density",
]


def upper_incomplete_gamma(m: int, x: float) -> float:
    """Upper incomplete gamma Gamma(m, x) for integer order m >= 1.

    Uses the finite sum Gamma(m, x) = (m-1)! e^(-x) sum_{i<m} x^i / i!,
    with terms accumulated in log space so large x cannot overflow.
    Returns 0 for x <= 0 (truncated-integral convention), and Gamma(m) at
    x -> 0+ continuously.
    """
    if m < 1:
        raise ConfigurationError(f"incomplete gamma order must be >= 1, got {m}")
    if x <= 0.0:
        return 0.0
    log_x = math.log(x)
    total = math.fsum(
        math.exp(i * log_x - math.lgamma(i + 1) - x) for i in range(m)
    )
    return math.factorial(m - 1) * total


def gamma_term(m: int, x: float) -> float:
    """Gamma(m, x) extended to m = 0, where it equals E1(x).

    The m = 0 case arises in the expected-power closed form whenever the
    density polynomial has a constant term (square antenna geometries).
    """
    if x <= 0.0:
        return 0.0
    if m == 0:
        return float(exp1(x))
    return upper_incomplete_gamma(m, x)


def digamma_int(n: int) -> float:
    """Digamma psi(n) at a positive integer: -gamma + sum_{i<n} 1/i."""
    if n < 1:
        raise ConfigurationError(f"digamma argument must be >= 1, got {n}")
    return -EULER_GAMMA + math.fsum(1.0 / i for i in range(1, n))


def meijer_special(n: int, z: float) -> float:
    """Evaluate M(n, z) = int_z^inf ln(x/z) x^(n-1) e^(-x) dx for z > 0.

    M(1, z) = E1(z); integration by parts gives
    M(n, z) = (n-1) M(n-1, z) + Gamma(n-1, z), all terms positive, so the
    recursion is stable.  Returns 0 for z <= 0.  Small-z behaviour is
    (n-1)! (-ln z + psi(n)) + O(z), which the tests pin down.
    """
    if n < 1:
        raise ConfigurationError(f"meijer_special order must be >= 1, got {n}")
    if z <= 0.0:
        return 0.0
    value = float(exp1(z))
    for order in range(2, n + 1):
        value = (order - 1) * value + upper_incomplete_gamma(order - 1, z)
    return value


@dataclass(frozen=True)
class SvCoeffs:
    """Coefficient table for the unordered squared-singular-value density.

    d        number of streams, min(Nt, Nr)
    b        max(Nt, Nr)
    s        b - d
    b_n      1 / (n! (n+s)!) for n = 0..d-1
    a        table a[(n, l, j)] for 0 <= l <= j <= n
    poly     combined polynomial coefficients: the density is
             x^s e^(-x) / d * sum_p poly[p] x^p
    """

    d: int
    b: int
    s: int
    b_n: tuple[float, ...]
    a: dict[tuple[int, int, int], float]
    poly: tuple[float, ...] = field(repr=False)


def _a_prefactor(n: int, l: int, s: int) -> int:
    """A_{n,l}: 1 when l = n, else prod_{r=0}^{n-l-1} (n - r + s)."""
    if l == n:
        return 1
    out = 1
    for r in range(n - l):
        out *= n - r + s
    return out


def sv_coeffs(nt: int, nr: int) -> SvCoeffs:
    """Build the density coefficient table for an Nr x Nt Gaussian channel."""
    if nt < 1 or nr < 1:
        raise ConfigurationError("antenna counts must be >= 1")
    d = min(nt, nr)
    b = max(nt, nr)
    s = b - d
    b_n = tuple(1.0 / (math.factorial(n) * math.factorial(n + s)) for n in range(d))
    a: dict[tuple[int, int, int], float] = {}
    for n in range(d):
        for l in range(n + 1):
            a_l = _a_prefactor(n, l, s) * math.comb(n, l)
            a[(n, l, l)] = float(a_l * a_l)
            for j in range(l + 1, n + 1):
                a_j = _a_prefactor(n, j, s) * math.comb(n, j)
                a[(n, l, j)] = float((-1) ** (l + j) * a_l * a_j)
    poly = [0.0] * (2 * d - 1)
    for n in range(d):
        for l in range(n + 1):
            poly[2 * l] += b_n[n] * a[(n, l, l)]
            for j in range(l + 1, n + 1):
                poly[l + j] += 2.0 * b_n[n] * a[(n, l, j)]
    return SvCoeffs(d=d, b=b, s=s, b_n=b_n, a=a, poly=tuple(poly))


def sv_density(coeffs: SvCoeffs, x):
    """Density of one unordered squared singular value, valid for x >= 0."""
    x = np.asarray(x, dtype=float)
    acc = np.zeros_like(x)
    for p in range(len(coeffs.poly) - 1, -1, -1):
        acc = acc * x + coeffs.poly[p]
    out = np.where(x >= 0.0, x**coeffs.s * np.exp(-x) / coeffs.d * acc, 0.0)
    return float(out) if out.ndim == 0 else out
