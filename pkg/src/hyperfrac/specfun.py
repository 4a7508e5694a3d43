"""Special functions: gamma, modified Bessel K, and the spectral density.

The spectral density (the reciprocal square modulus of Harish-Chandra's
c-function, normalized as ``|Gamma(i lam + (n-1)/2)|^2 / (2 (2 pi)^n
|Gamma(i lam)|^2)``) reduces to elementary closed forms in the two supported
dimensions:

    n = 2 :  lam * tanh(pi lam) / (2 (2 pi)^2)
    n = 3 :  lam^2 / (2 (2 pi)^3)

via ``|Gamma(i lam)|^2 = pi / (lam sinh(pi lam))`` and
``|Gamma(1/2 + i lam)|^2 = pi / cosh(pi lam)``.  The generic complex-gamma
expression is kept alongside as a validation oracle.

Gamma and Bessel evaluations delegate to scipy.special, which already meets
the accuracy this package needs; the wrappers only add domain checking.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from .errors import DomainError, PoleError
from .geometry import check_dimension


def gamma_fn(x):
    """Gamma(x) for real x, raising PoleError at nonpositive integers."""
    x_arr = np.asarray(x, dtype=float)
    at_pole = (x_arr <= 0) & (x_arr == np.round(x_arr))
    if np.any(at_pole):
        raise PoleError(f"gamma pole at {x_arr[at_pole].ravel()[:3]}")
    out = sp.gamma(x_arr)
    return out if out.ndim else float(out)


def bessel_k(nu, x):
    """Modified Bessel function K_nu(x) for nu >= 0, x > 0."""
    if nu < 0:
        # K is even in its order; keep the contract strict anyway
        raise DomainError(f"order nu={nu} must be nonnegative")
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr <= 0):
        raise DomainError("bessel_k requires x > 0")
    out = sp.kv(nu, x_arr)
    return out if out.ndim else float(out)


def plancherel_density(lam, n):
    """Spectral density against d(lambda) on [0, infinity).

    Closed forms per dimension; vanishes at lam = 0 in both.
    """
    check_dimension(n)
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr < 0):
        raise DomainError("spectral parameter must be nonnegative")
    if n == 3:
        out = lam_arr**2 / (2.0 * (2.0 * np.pi) ** 3)
    else:
        out = lam_arr * np.tanh(np.pi * lam_arr) / (2.0 * (2.0 * np.pi) ** 2)
    return out if out.ndim else float(out)


def plancherel_density_gamma(lam, n):
    """Same density through complex log-gamma; validation oracle only."""
    check_dimension(n)
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    out = np.empty_like(lam_arr)
    nz = lam_arr > 0
    z_top = 1j * lam_arr[nz] + (n - 1) / 2.0
    z_bot = 1j * lam_arr[nz]
    ratio = np.exp(2.0 * (sp.loggamma(z_top).real - sp.loggamma(z_bot).real))
    out[nz] = ratio / (2.0 * (2.0 * np.pi) ** n)
    out[~nz] = 0.0  # |Gamma(i lam)| blows up, the ratio vanishes linearly
    return out if np.ndim(lam) else float(out[0])


@dataclass(frozen=True)
class KernelConstants:
    """Normalization constants of the singular-integral kernel.

    ``c_ns`` is the front constant 8 sqrt(2) Gamma(n+s) / (3 Gamma(n/2)
    Gamma(-s)); it is negative for s in (0, 1) because Gamma(-s) < 0 there,
    and the sign is recorded separately so downstream calibration can work
    with the magnitude.  ``c1`` is the kernel-profile constant
    1 / (2^{n-2+2s} Gamma((n-1)/2) Gamma((1+2s)/2)).
    """

    n: int
    s: float
    c_ns: float
    c1: float
    sign_c_ns: int


def kernel_constants(n, s):
    check_dimension(n)
    if not 0.0 < s < 1.0:
        raise DomainError(f"kernel constants require s in (0, 1), got {s}")
    c_ns = 8.0 * np.sqrt(2.0) * gamma_fn(n + s) / (3.0 * gamma_fn(n / 2.0) * gamma_fn(-s))
    c1 = 1.0 / (2.0 ** (n - 2 + 2 * s) * gamma_fn((n - 1) / 2.0) * gamma_fn((1 + 2 * s) / 2.0))
    return KernelConstants(n=n, s=float(s), c_ns=float(c_ns), c1=float(c1),
                           sign_c_ns=int(np.sign(c_ns)))
