"""Decay weights, heat-trace profiles, and the moment decoupling test.

The pieces fit together as follows.  A weight ``DecayWeight`` encodes the
admissible growth of test functions against compactly supported data
(``compact_support_decay_check`` reports the best pairing constant).  A
heat-trace profile is the time signal obtained by smoothing a function with
the heat semigroup at a point away from its support and weighting by a
power of time; its two-sided exponential decay is what the moment machinery
feeds on.  ``moment_sum`` evaluates the weighted moment functionals, and
``decoupling_test`` assembles the moment matrix over a profile basis and
reports its smallest singular value, flagging the exact-resonance kernel
that appears when two fractional orders collide.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geometry as geo
from . import spectral as spc
from .errors import (
    DomainError,
    IllConditionedError,
    NonFiniteError,
    QuadratureError,
    SupportError,
)
from .fracop import sobolev_norm

RESONANCE_TOLERANCE = 1e-10
ENDPOINT_MASS_TOLERANCE = 1e-12


# ---------------------------------------------------------------------------
# decay weights and the compact-support pairing bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayWeight:
    """Smooth radial weight e^{-gamma sqrt(1 + d(e0, x)^2)}.

    The rate must exceed (n-1)/2 strictly, the threshold at which the
    weight beats the volume growth of the space in L^2 pairings.
    """

    gamma: float
    n: int = 3

    def __post_init__(self):
        geo.check_dimension(self.n)
        if not self.gamma > 0.5 * (self.n - 1):
            raise DomainError(
                f"decay rate {self.gamma} must exceed (n-1)/2 = {0.5 * (self.n - 1)}"
            )

    def profile(self, r):
        """Weight value at geodesic radius r from the base point."""
        r = np.asarray(r, dtype=float)
        return np.exp(-self.gamma * np.sqrt(1.0 + r**2))


def decay_weight_eval(x, w):
    """Evaluate the weight at a point (or at a plain geodesic radius)."""
    if isinstance(x, geo.HyperPoint):
        r = geo.distance(geo.base_point(w.n), x)
    else:
        r = float(x)
        if r < 0:
            raise DomainError("geodesic radius must be nonnegative")
    return float(w.profile(r))


@dataclass(frozen=True)
class DecayBound:
    """Best constant found in |<u, probe>| <= C * ||weight * probe||_{H^r}."""

    constant: float
    ratios: tuple
    gamma: float
    smoothness: float


def compact_support_decay_check(u, gamma, probes, smoothness=0.0, sgrid=None):
    """Pairing-bound report for compactly supported radial data.

    Compact support makes every pairing against a test function controlled
    by the weighted Sobolev norm of the test function alone; this sweeps the
    given probes and returns the largest observed ratio, i.e. the smallest
    constant valid across the sweep.
    """
    w = DecayWeight(gamma=gamma, n=u.n)
    support = np.abs(u.values) > 0
    tail = u.grid.nodes > u.grid.r_max - 2.0
    if np.any(support & tail):
        raise DomainError("data must be supported well inside the grid ball")

    ratios = []
    for probe in probes:
        if probe.grid is not u.grid and not np.array_equal(
                probe.grid.nodes, u.grid.nodes):
            raise DomainError("probes must share the data grid")
        pairing = abs(geo.sphere_area(u.n)
                      * u.grid.integrate(u.values * probe.values))
        rate = None if probe.decay_rate is None else probe.decay_rate + gamma
        weighted = spc.RadialFunction(
            grid=u.grid,
            values=w.profile(u.grid.nodes) * probe.values,
            decay_rate=rate,
        )
        norm = sobolev_norm(weighted, smoothness, sgrid=sgrid)
        if norm <= 0:
            raise DomainError("probe vanishes identically")
        ratios.append(pairing / norm)
    constant = max(ratios) if ratios else 0.0
    return DecayBound(constant=constant, ratios=tuple(ratios),
                      gamma=gamma, smoothness=smoothness)


# ---------------------------------------------------------------------------
# heat-trace profiles and their decay envelopes
# ---------------------------------------------------------------------------

@dataclass
class HeatTraceSamples:
    """Sampled profile f(t) = -(sin(pi a)/pi) (e^{t L} v)(x) t^{-(1+a)}.

    ``separation`` is the geodesic gap between the evaluation point and the
    support of the data; it drives the small-time decay e^{-sep^2/(4t)}.
    """

    t: np.ndarray
    values: np.ndarray
    alpha: float
    separation: float
    radius: float
    n: int


def _support_separation(v, r_x):
    support = np.abs(v.values) > 0
    if not support.any():
        return math.inf
    lo = float(v.grid.nodes[support].min())
    hi = float(v.grid.nodes[support].max())
    if lo <= r_x <= hi:
        return 0.0
    return min(abs(r_x - lo), abs(r_x - hi))


def heat_trace_f(v, x, alpha, t_grid, kappa=None, angular_nodes=96):
    """Heat-trace profile of radial data at a point away from its support.

    The semigroup value is computed through the closed-form heat kernel
    (the spectral route loses the signal to cancellation once the values
    drop below roundoff of the transform, which happens quickly at small
    times).  Off-center evaluation integrates the kernel over the sphere of
    each source radius.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"fractional order {alpha} must lie in (0, 1)")
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
        raise DomainError("time grid must be positive and increasing")

    if isinstance(x, geo.HyperPoint):
        r_x = geo.distance(geo.base_point(v.n), x)
    else:
        r_x = float(x)
    sep = _support_separation(v, r_x)
    if kappa is None:
        kappa = sep
    if not kappa > 0 or sep < kappa - 1e-12:
        raise SupportError(
            f"data support comes within {sep:.3e} of the evaluation point; "
            f"declared separation {kappa}"
        )

    nodes = v.grid.nodes
    mass = v.grid.measure * v.values
    active = np.abs(mass) > 0
    rho = nodes[active]
    mass = mass[active]
    if rho.size == 0:
        values = np.zeros_like(t)
    elif r_x == 0.0:
        p = np.stack([spc.heat_kernel(rho, ti, v.n) for ti in t])
        values = geo.sphere_area(v.n) * (p @ mass)
    else:
        # kernel averaged over the sphere of each source radius: for n = 3
        # the average is in mu = cos(angle) with flat weight, for n = 2 it
        # is the plain circle average
        mu, wq = np.polynomial.legendre.leggauss(angular_nodes)
        if v.n == 3:
            cos_angle = mu
            ang_w = 0.5 * wq
        else:
            theta = np.pi * 0.5 * (mu + 1.0)
            cos_angle = np.cos(theta)
            ang_w = 0.5 * wq                     # (pi/2) wq / pi
        cosd = (np.cosh(r_x) * np.cosh(rho)[:, None]
                - np.sinh(r_x) * np.sinh(rho)[:, None] * cos_angle[None, :])
        dist = np.arccosh(np.maximum(cosd, 1.0))
        values = np.empty_like(t)
        for i, ti in enumerate(t):
            avg = spc.heat_kernel(dist, ti, v.n) @ ang_w
            values[i] = geo.sphere_area(v.n) * float(np.dot(avg, mass))
    values = -(math.sin(math.pi * alpha) / math.pi) * values * t ** (-(1.0 + alpha))
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("heat-trace samples are not finite")
    return HeatTraceSamples(t=t, values=values, alpha=alpha, separation=sep,
                            radius=r_x, n=v.n)


def _fit_envelopes(t, values, small_window, large_window):
    f = np.abs(values)

    def fit(mask, regressor):
        mask = mask & (f > 0)
        if mask.sum() < 3:
            raise DomainError("envelope fit needs at least three usable samples")
        A = np.column_stack([np.ones(mask.sum()), regressor[mask]])
        coef, *_ = np.linalg.lstsq(A, np.log(f[mask]), rcond=None)
        return {"amplitude": float(math.exp(coef[0])), "rate": float(-coef[1])}

    small = fit((t >= small_window[0]) & (t <= small_window[1]), 1.0 / t)
    large = fit((t >= large_window[0]) & (t <= large_window[1]), t)
    return {"small_t": small, "large_t": large}


def envelope_fits(samples, small_window=(1e-3, 1e-1), large_window=(5.0, 50.0)):
    """Fitted exponential envelopes of a heat-trace profile.

    Returns rates and amplitudes for log|f| ~ a - delta/t on the small-time
    window and log|f| ~ a - delta t on the large-time window, the two-sided
    decay the moment machinery requires.
    """
    return _fit_envelopes(samples.t, samples.values, small_window, large_window)


# ---------------------------------------------------------------------------
# moment functionals
# ---------------------------------------------------------------------------

def moment_grid(t_min=1e-4, t_max=60.0, count=600):
    """Log-uniform time nodes; uniform in u = log t, where the integrands
    decay doubly exponentially toward both ends."""
    if not 0 < t_min < t_max or count < 16:
        raise DomainError("need 0 < t_min < t_max and a reasonable node count")
    return np.exp(np.linspace(math.log(t_min), math.log(t_max), count))


@dataclass
class MomentSystem:
    """Sampled profiles f_k with distinct fractional orders.

    Construction validates the two-sided decay of each profile on its own
    samples and stores the fitted rates; the moment functionals are only
    meaningful for profiles with such decay.
    """

    alphas: tuple
    t: np.ndarray
    f_values: np.ndarray
    m_start: int = 1
    decay_fits: tuple = field(default=())

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if any(not 0.0 < a < 1.0 for a in self.alphas):
            raise DomainError("fractional orders must lie in (0, 1)")
        if len(set(self.alphas)) != len(self.alphas):
            raise DomainError("fractional orders must be pairwise distinct")
        self.t = np.asarray(self.t, dtype=float)
        self.f_values = np.atleast_2d(np.asarray(self.f_values, dtype=float))
        if self.f_values.shape != (len(self.alphas), self.t.size):
            raise DomainError("profile samples must be shaped (orders, times)")
        if not np.all(np.isfinite(self.f_values)):
            raise NonFiniteError("profile samples are not finite")
        if self.m_start < 0:
            raise DomainError("the moment window must start at m >= 0")
        fits = []
        for row in self.f_values:
            fits.append(self._decay_fit(row))
        self.decay_fits = tuple(fits)

    def _decay_fit(self, row):
        usable = self.t[np.abs(row) > 0]
        if usable.size == 0:
            return {"delta_small": math.inf, "delta_large": math.inf,
                    "amplitude": 0.0}
        if usable.size < 8:
            raise DomainError("too few nonzero samples to certify decay")
        # windows anchored at the usable ends: samples below the smallest
        # usable time have underflowed, which is decay in itself
        mid = float(np.sqrt(usable[0] * usable[-1]))
        lo = (float(usable[0]), min(50.0 * float(usable[0]), mid))
        hi = (max(0.1 * float(usable[-1]), mid), float(usable[-1]))
        fits = _fit_envelopes(self.t, row, lo, hi)
        if fits["small_t"]["rate"] <= 0 or fits["large_t"]["rate"] <= 0:
            raise DomainError(
                "profile samples do not show two-sided exponential decay"
            )
        return {"delta_small": fits["small_t"]["rate"],
                "delta_large": fits["large_t"]["rate"],
                "amplitude": max(fits["small_t"]["amplitude"],
                                 fits["large_t"]["amplitude"])}


class MomentValue(float):
    """Moment sum carrying its quadrature error estimate."""

    def __new__(cls, value, error):
        out = super().__new__(cls, value)
        out.error = float(error)
        return out


def _log_trapezoid(t, integrand, m):
    """integral f(t) t^{-m} dt on log-spaced samples, with a self-check.

    Integration runs in u = log t where the weight becomes e^{(1-m)u} and
    the profile decay makes the integrand vanish doubly exponentially at
    both ends; the estimate is compared against its half-resolution
    restriction, and the endpoint contributions must be negligible.
    """
    u = np.log(t)
    g = integrand * np.exp((1.0 - m) * u)
    if not np.all(np.isfinite(g)):
        raise QuadratureError(f"moment integrand overflowed for m = {m}")

    def trap(uu, gg):
        return float(np.trapezoid(gg, uu))

    full = trap(u, g)
    half = trap(u[::2], g[::2])
    err = abs(full - half)
    mass = np.abs(g[:-1] + g[1:]) * 0.5 * np.diff(u)
    total = float(mass.sum())
    edge = float(mass[0] + mass[-1])
    if total > 0 and edge > ENDPOINT_MASS_TOLERANCE * total:
        raise QuadratureError(
            f"time grid does not contain the m = {m} moment integrand; "
            "extend it toward 0 or infinity"
        )
    if total > 0 and err > 1e-8 * total + 1e-300:
        raise QuadratureError(
            f"moment quadrature self-check failed for m = {m}: "
            f"refinement moved the value by {err:.3e}"
        )
    return full, err


def moment_sum(ms, m):
    """Weighted moment functional of the sampled profiles at integer m."""
    m = int(m)
    if m < ms.m_start:
        raise DomainError(f"moment index {m} below the declared start {ms.m_start}")
    if m > 150:
        raise DomainError("moment index too large for stable gamma weights")
    value, error = 0.0, 0.0
    for a, row in zip(ms.alphas, ms.f_values):
        integral, err = _log_trapezoid(ms.t, row, m)
        weight = math.gamma(m + 1.0 + a)
        value += weight * integral
        error += weight * err
    return MomentValue(value, error)


# ---------------------------------------------------------------------------
# the decoupling test
# ---------------------------------------------------------------------------

def decaying_profile_basis(count, a_range=(0.5, 2.5), b_range=(0.3, 2.0)):
    """Profiles e^{-a t - b/t} with parameters on a low-discrepancy lattice.

    Each satisfies the two-sided decay exactly, and the moment integrals
    have closed forms through modified Bessel functions, which the tests
    use as an independent oracle.
    """
    if count < 1:
        raise DomainError("need at least one profile")
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    params = []
    for p in range(count):
        fa = (p + 0.5) / count
        fb = (p * golden + 0.382) % 1.0
        params.append((a_range[0] + fa * (a_range[1] - a_range[0]),
                       b_range[0] + fb * (b_range[1] - b_range[0])))

    def make(a, b):
        return lambda t: np.exp(-a * t - b / t)

    return [make(a, b) for a, b in params], params


@dataclass(frozen=True)
class DecouplingReport:
    """Smallest-singular-value report for the moment matrix.

    ``sigma_min`` is computed after per-profile normalization (so the
    report is invariant under rescaling any basis element) and per-row
    equilibration (so the gamma weights do not drown the small-m rows);
    rows scale only by their own content, which keeps sigma_min
    nondecreasing as the moment window grows.
    """

    alphas: tuple
    m_values: tuple
    sigma_min: float
    condition_number: float
    null_vector: np.ndarray
    resonant: bool
    profile_norms: tuple

    def report_dict(self, envelope_fits=None):
        return {
            "alphas": list(self.alphas),
            "m_range": [int(self.m_values[0]), int(self.m_values[-1])],
            "sigma_min": self.sigma_min,
            "condition_number": self.condition_number,
            "resonant": self.resonant,
            "envelope_fits": envelope_fits,
        }


def write_moment_report(path, report, envelope_fits=None):
    doc = report.report_dict(envelope_fits=envelope_fits)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2)
    os.replace(tmp, path)


def decoupling_test(alphas, profiles, m_range=None, t_grid=None,
                    resonance_tol=RESONANCE_TOLERANCE):
    """Assemble the coefficient-to-moments map and report its conditioning.

    Columns are indexed by (order, profile); a coefficient vector c gives
    candidate traces f_k = sum_p c_{k,p} g_p, and the row for moment m holds
    the weighted moment sums.  A strictly positive smallest singular value
    is finite-window evidence that only the zero candidate annihilates all
    moments; a (numerically) exact kernel with two colliding orders is the
    resonance degeneracy and is flagged rather than raised.
    """
    alphas = tuple(float(a) for a in alphas)
    if any(not 0.0 < a < 1.0 for a in alphas):
        raise DomainError("fractional orders must lie in (0, 1)")
    if t_grid is None:
        t_grid = moment_grid()
    t = np.asarray(t_grid, dtype=float)
    n_ord, n_prof = len(alphas), len(profiles)
    if n_ord == 0 or n_prof == 0:
        raise DomainError("need at least one order and one profile")

    u = np.log(t)
    samples = []
    norms = []
    for g in profiles:
        vals = np.asarray(g(t), dtype=float)
        if vals.shape != t.shape or not np.all(np.isfinite(vals)):
            raise DomainError("profiles must evaluate finitely on the grid")
        scale = float(np.trapezoid(np.abs(vals), u))   # integral |g| dt/t
        if scale <= 0:
            raise DomainError("profiles must not vanish identically")
        samples.append(vals / scale)
        norms.append(scale)

    cols = n_ord * n_prof
    if m_range is None:
        # the window must be at least as tall as the coefficient space or
        # the smallest singular value is structurally zero; widen past the
        # usual twelve moments when many order/profile pairs are in play
        count = max(12, cols + 3)
        m_values = tuple(range(1, 1 + count))
    else:
        m_values = tuple(int(m) for m in m_range)
        if len(m_values) < cols:
            raise DomainError(
                "moment window shorter than the coefficient space; "
                "the smallest singular value would be structurally zero"
            )

    rows = np.empty((len(m_values), cols))
    for i, m in enumerate(m_values):
        integrals = [_log_trapezoid(t, g, m)[0] for g in samples]
        for k, a in enumerate(alphas):
            w = math.gamma(m + 1.0 + a)
            rows[i, k * n_prof:(k + 1) * n_prof] = w * np.asarray(integrals)
        peak = np.max(np.abs(rows[i]))
        if peak == 0:
            raise IllConditionedError(f"moment row m = {m} vanished entirely")
        rows[i] /= peak

    _, s, Vh = scipy.linalg.svd(rows)
    sigma_min = float(s[-1])
    cond = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    pairs = [(i, j) for i in range(n_ord) for j in range(i + 1, n_ord)]
    collision = any(abs(alphas[i] - alphas[j]) < 1e-12 for i, j in pairs)
    resonant = collision and sigma_min < resonance_tol
    # moment matrices are legitimately ill conditioned; only a smallest
    # singular value at the numerical-rank floor signals an exactly
    # degenerate configuration, and without an order collision that is a
    # defect of the inputs rather than a resonance
    rank_floor = max(rows.shape) * np.finfo(float).eps * float(s[0])
    if sigma_min < rank_floor and not collision:
        raise IllConditionedError(
            f"moment matrix numerically rank deficient without a resonance: "
            f"sigma_min = {sigma_min:.3e}, condition number {cond:.3e}"
        )
    return DecouplingReport(alphas=alphas, m_values=m_values,
                            sigma_min=sigma_min, condition_number=cond,
                            null_vector=Vh[-1].copy(), resonant=resonant,
                            profile_norms=tuple(norms))


# ---------------------------------------------------------------------------
# the exact resonance between integer-shifted orders
# ---------------------------------------------------------------------------

def resonance_counterexample(u, s, m, sgrid=None):
    """Relative defect of composing a fractional power with an integer one.

    The composition is evaluated the long way: the integer power is applied
    spectrally, synthesized back to a radial profile, re-transformed, and
    raised to the fractional power, so the figure includes a full transform
    round trip.  A value at roundoff scale confirms the exact cancellation
    that defeats moment decoupling when two orders differ by an integer.
    """
    if not 0.0 < s < 1.0:
        raise DomainError(f"fractional order {s} must lie in (0, 1)")
    m = int(m)
    if m < 0:
        raise DomainError("integer shift must be nonnegative")
    if m == 0:
        return 0.0
    uh = spc.hft_radial(u, sgrid=sgrid)
    tau = spc.tau(uh.grid.nodes, u.n)
    shifted = spc.SpectralFunction(grid=uh.grid, values=tau**m * uh.values)
    mid = spc.hft_inverse(shifted, rgrid=u.grid)
    mid_h = spc.hft_radial(mid, sgrid=uh.grid)
    lhs = tau**s * mid_h.values
    rhs = tau ** (s + m) * uh.values
    num = uh.grid.integrate_plancherel((lhs - rhs) ** 2)
    den = uh.grid.integrate_plancherel(rhs**2)
    if den <= 0:
        raise DomainError("input transforms to zero; defect undefined")
    return float(math.sqrt(num / den))
