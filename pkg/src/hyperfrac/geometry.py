"""Hyperboloid model of hyperbolic space and radial quadrature.

Points live on the upper sheet ``{x : x_0^2 - x_1^2 - ... - x_n^2 = 1, x_0 > 0}``
of the unit hyperboloid in Minkowski space R^{n+1}.  The bilinear form is

    [x, y] = x_0 y_0 - x_1 y_1 - ... - x_n y_n,

geodesic distance is ``d(x, y) = arccosh [x, y]`` and the volume element in
geodesic polar coordinates around any point is ``sinh^{n-1}(r) dr domega``.
Only n = 2 and n = 3 are supported; everything downstream relies on the
closed-form special functions available in these dimensions.

Distances between nearby points are computed through the Minkowski norm of
the coordinate difference (``2 asinh(sqrt(q)/2)`` with ``q = -[x-y, x-y]``),
which avoids the cancellation ``arccosh(1 + eps)`` suffers for small
separations.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, NonFiniteError

SUPPORTED_DIMENSIONS = (2, 3)

# switch to log-scaled evaluation of sinh/cosh powers beyond this radius
LOG_SCALE_RADIUS = 30.0


def check_dimension(n):
    if n not in SUPPORTED_DIMENSIONS:
        raise DomainError(f"dimension n={n} not supported; expected one of {SUPPORTED_DIMENSIONS}")


def sphere_area(n):
    """Surface measure of the unit sphere S^{n-1} bounding the model fibre."""
    check_dimension(n)
    return 2.0 * np.pi if n == 2 else 4.0 * np.pi


@dataclass(frozen=True)
class HyperPoint:
    """A point on the upper hyperboloid sheet, stored as its R^{n+1} coordinates."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        object.__setattr__(self, "coords", c)
        if c.ndim != 1 or c.size - 1 not in SUPPORTED_DIMENSIONS:
            raise DomainError(f"expected a vector of length 3 or 4, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise NonFiniteError("point coordinates must be finite")
        if c[0] < 1.0 - 1e-12:
            raise DomainError(f"x_0 = {c[0]} < 1: point below the upper sheet")
        norm = c[0] ** 2 - np.dot(c[1:], c[1:])
        # relative check: x_0^2 grows like e^{2r}, so the absolute defect scales
        if abs(norm - 1.0) > 1e-9 * max(1.0, c[0] ** 2):
            raise DomainError(f"[x, x] = {norm} is not 1: not on the hyperboloid")

    @property
    def n(self):
        return self.coords.size - 1


@dataclass(frozen=True)
class PolarCoord:
    """Geodesic polar coordinates (r, omega) around the base point."""

    r: float
    omega: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        object.__setattr__(self, "omega", om)
        if self.r < 0:
            raise DomainError(f"radius r={self.r} must be nonnegative")
        if om.size not in SUPPORTED_DIMENSIONS:
            raise DomainError(f"direction must have 2 or 3 components, got {om.size}")
        nrm = np.linalg.norm(om)
        if abs(nrm - 1.0) > 1e-10:
            raise DomainError(f"direction vector has norm {nrm}, expected 1")


def base_point(n):
    """The model's origin e_0 = (1, 0, ..., 0)."""
    check_dimension(n)
    e = np.zeros(n + 1)
    e[0] = 1.0
    return HyperPoint(e)


def lorentz_inner(x, y):
    """Minkowski pairing [x, y]; >= 1 for two points on the upper sheet."""
    a, b = x.coords, y.coords
    if a.size != b.size:
        raise DomainError("points live in different dimensions")
    return float(a[0] * b[0] - np.dot(a[1:], b[1:]))


def distance(x, y):
    """Geodesic distance d(x, y) = arccosh [x, y], stable for nearby points."""
    d = x.coords - y.coords
    q = float(np.dot(d[1:], d[1:]) - d[0] ** 2)  # = 2([x,y] - 1) >= 0
    if q <= 0.0:
        return 0.0
    return float(2.0 * np.arcsinh(0.5 * np.sqrt(q)))


def polar_to_point(r, omega, n=None):
    """Map polar coordinates to the hyperboloid: (cosh r, sinh r * omega)."""
    om = np.asarray(omega, dtype=float)
    if n is None:
        n = om.size
    check_dimension(n)
    if om.size != n:
        raise DomainError(f"direction has {om.size} components, expected {n}")
    coords = np.empty(n + 1)
    coords[0] = np.cosh(r)
    coords[1:] = np.sinh(r) * om
    return HyperPoint(coords)


def point_to_polar(x):
    """Inverse of :func:`polar_to_point`; direction defaults to e_1 at the origin."""
    r = float(np.arccosh(max(x.coords[0], 1.0)))
    v = x.coords[1:]
    nrm = np.linalg.norm(v)
    if nrm < 1e-300:
        omega = np.zeros(x.n)
        omega[0] = 1.0
    else:
        omega = v / nrm
    return PolarCoord(r=r, omega=omega)


def log_sinh(r):
    """log(sinh r) evaluated without overflow for large r."""
    r = np.asarray(r, dtype=float)
    small = r < 1.0
    with np.errstate(divide="ignore"):  # log(0) = -inf at r = 0 is the right answer
        out = np.where(
            small,
            np.log(np.sinh(np.where(small, r, 1.0))),
            r + np.log1p(-np.exp(-2.0 * np.where(small, 1.0, r))) - np.log(2.0),
        )
    return out if out.ndim else float(out)


def volume_weight(r, n):
    """Radial density sinh^{n-1}(r) of the volume element."""
    check_dimension(n)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("radius must be nonnegative")
    with np.errstate(over="ignore"):  # inf past r ~ 710 is the honest limit
        out = np.where(r > LOG_SCALE_RADIUS, np.exp((n - 1) * log_sinh(r)), np.sinh(r) ** (n - 1))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

class QuadResult(NamedTuple):
    value: float
    error: float


def gauss_panels(edges, nodes_per_panel):
    """Composite Gauss-Legendre rule over consecutive intervals in ``edges``."""
    edges = np.asarray(edges, dtype=float)
    ref_x, ref_w = np.polynomial.legendre.leggauss(nodes_per_panel)
    a = edges[:-1][:, None]
    b = edges[1:][:, None]
    nodes = 0.5 * (b - a) * ref_x[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * ref_w[None, :]
    return nodes.ravel(), weights.ravel()


def graded_edges(r_max, num_panels, grading=2.0):
    """Panel edges on [0, r_max] with polynomial clustering toward 0.

    ``grading = 1`` gives uniform panels; larger exponents concentrate
    panels near the origin, where integrable kernel singularities live.
    """
    if r_max <= 0:
        raise DomainError("r_max must be positive")
    if num_panels < 1:
        raise DomainError("need at least one panel")
    k = np.arange(num_panels + 1, dtype=float) / num_panels
    return r_max * k**grading


def radial_quadrature(f, r_max, n, num_panels=64, nodes_per_panel=16, grading=2.0):
    """Integrate ``f(r) sinh^{n-1}(r)`` over [0, r_max].

    Parameters
    ----------
    f : callable or ndarray
        Radial profile.  A callable is evaluated at the rule's nodes and once
        more on a refined rule to produce the error estimate.  An array must
        hold samples at the nodes of the rule defined by the remaining
        arguments; the error is then estimated against a cubic-spline
        integral through the same samples.
    r_max, n : float, int
        Truncation radius and dimension.
    num_panels, nodes_per_panel, grading
        Composite Gauss-Legendre rule parameters.

    Returns
    -------
    QuadResult
        ``value`` and a defensive ``error`` estimate.
    """
    check_dimension(n)
    edges = graded_edges(r_max, num_panels, grading)
    nodes, weights = gauss_panels(edges, nodes_per_panel)
    w_meas = weights * volume_weight(nodes, n)

    if callable(f):
        vals = np.asarray(f(nodes), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError("integrand returned non-finite values")
        value = float(np.dot(w_meas, vals))
        fine_nodes, fine_weights = gauss_panels(edges, nodes_per_panel + 6)
        fine_vals = np.asarray(f(fine_nodes), dtype=float)
        fine = float(np.dot(fine_weights * volume_weight(fine_nodes, n), fine_vals))
        return QuadResult(value=fine, error=abs(fine - value))

    vals = np.asarray(f, dtype=float)
    if vals.shape != nodes.shape:
        raise DomainError(
            f"sampled integrand has length {vals.size}, rule has {nodes.size} nodes"
        )
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("sampled integrand contains non-finite values")
    value = float(np.dot(w_meas, vals))
    from scipy.interpolate import CubicSpline

    spline = CubicSpline(nodes, vals * volume_weight(nodes, n))
    alt = float(spline.integrate(nodes[0], nodes[-1]))
    return QuadResult(value=value, error=abs(value - alt))


def sphere_angle_rule(n, num_nodes=64):
    """Quadrature for integrating g(cos psi) over directions on S^{n-1}.

    Returns cosines c_i and weights w_i with sum(w_i) = |S^{n-1}| and
    ``integral over S^{n-1} of g(<omega, omega_0>)`` approximated by
    ``sum w_i g(c_i)``.
    """
    check_dimension(n)
    x, w = np.polynomial.legendre.leggauss(num_nodes)
    if n == 3:
        # d omega = 2 pi d(cos psi) on S^2
        return x, 2.0 * np.pi * w
    # n == 2: integrate over the angle itself, two arcs
    theta = 0.5 * np.pi * (x + 1.0)
    return np.cos(theta), np.pi * w
