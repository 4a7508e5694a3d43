"""Backend-neutral discrete exterior-value problem.

The assembled object couples every degree of freedom with every other one
(the operator is nonlocal), so matrices are dense.  Degrees of freedom are
all mesh vertices except the Dirichlet layer at the truncation radius; the
unknowns are the interior (OMEGA) positions, everything else carries
prescribed exterior data.

Both backends hand over the same dictionary of parts: the symbol matrix,
mass and potential Gram matrices, a quadrature table for loads and error
norms, and independent-rule evaluators used by the cross-checks.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..errors import AssemblyError, DomainError, SingularSystemError
from . import mesh as msh
from .radial import assemble_radial, dn_lambda_max

SYMMETRY_TOLERANCE = 1e-10
RESIDUAL_TOLERANCE = 1e-10


@dataclass
class StiffnessSystem:
    """Dense Galerkin system for P + q with exterior data bookkeeping.

    ``matrix`` holds the full bilinear form (symbol part plus potential term)
    over all dofs; ``interior``/``exterior`` index into dof numbering.  The
    ``backend`` dict carries quadrature handles and the independent pairing
    evaluator; see the assembling module for its keys.
    """

    mesh: msh.Mesh
    spec: object
    q: msh.Potential
    matrix: np.ndarray
    mass: np.ndarray
    dofs: np.ndarray
    interior: np.ndarray
    exterior: np.ndarray
    backend: dict = field(repr=False, default_factory=dict)
    _cache: dict = field(repr=False, default_factory=dict, compare=False)

    def __post_init__(self):
        rel = np.linalg.norm(self.matrix - self.matrix.T) / max(np.linalg.norm(self.matrix), 1e-300)
        if rel > SYMMETRY_TOLERANCE:
            raise AssemblyError(f"assembled matrix asymmetric: relative {rel:.3e}")

    @property
    def interior_matrix(self):
        return self.matrix[np.ix_(self.interior, self.interior)]

    def coercivity_check(self, margin=1e-9):
        """Smallest eigenvalue of the shifted interior block; must be positive.

        The form plus mu * mass with mu just above the potential bound is
        coercive in the continuum; a nonpositive discrete eigenvalue means a
        broken assembly.
        """
        mu = self.q.bound + margin
        block = self.interior_matrix + mu * self.mass[np.ix_(self.interior, self.interior)]
        lo = float(scipy.linalg.eigvalsh(block, subset_by_index=(0, 0))[0])
        if lo <= 0.0:
            raise AssemblyError(f"coercivity check failed: eigenvalue {lo:.3e} at shift {mu}")
        return lo

    def _factor(self):
        if "cho" not in self._cache:
            K = self.interior_matrix
            try:
                self._cache["cho"] = scipy.linalg.cho_factor(K)
            except scipy.linalg.LinAlgError:
                svals = scipy.linalg.svdvals(K)
                raise SingularSystemError(
                    "interior system is singular; smallest singular value "
                    f"{svals[-1]:.3e} against largest {svals[0]:.3e}"
                ) from None
        return self._cache["cho"]

    def node_values(self, vertex_values):
        """P1 field at the backend quadrature nodes."""
        return self.backend["quad_W"] @ np.asarray(vertex_values, dtype=float)[self.dofs]

    def omega_l2(self, node_values):
        """L^2 norm over the interior region of a field given at quad nodes."""
        w = self.backend["quad_w"]
        mask = self.backend["omega_node_mask"]
        return float(np.sqrt(np.dot(w[mask], np.asarray(node_values)[mask] ** 2)))

    def cell_integrals(self, node_values):
        """Per-cell integrals of a field given at quadrature nodes."""
        w = self.backend["quad_w"] * np.asarray(node_values, dtype=float)
        return np.bincount(self.backend["node_cells"], weights=w,
                           minlength=self.mesh.num_cells)


@dataclass
class DiscreteSolution:
    """Vertex values of a solve, with the datum and the achieved residual."""

    mesh: msh.Mesh
    vertex_values: np.ndarray
    data_values: np.ndarray
    residual: float


def _check_same_problem(sys, mesh, spec, q):
    if sys.mesh is not mesh and (sys.mesh.num_vertices != mesh.num_vertices
                                 or sys.mesh.kind != mesh.kind):
        raise DomainError("system was assembled on a different mesh")
    same_spec = (len(spec.terms) == len(sys.spec.terms)
                 and np.allclose(spec.orders, sys.spec.orders)
                 and np.allclose(spec.coeffs, sys.spec.coeffs))
    if not same_spec:
        raise DomainError("system was assembled with a different operator")
    if not np.array_equal(np.asarray(q.values, dtype=float), sys.q.values):
        raise DomainError("system was assembled with a different potential")


def _vertex_vector(mesh, f):
    if callable(f):
        vals = np.asarray([f(r) for r in mesh.radii], dtype=float)
    else:
        vals = np.asarray(f, dtype=float)
        if vals.shape != (mesh.num_vertices,):
            raise DomainError("exterior data must give one value per vertex")
    if not np.all(np.isfinite(vals)):
        raise DomainError("exterior data must be finite")
    return vals


def assemble_B_q(mesh, spec, q, **options):
    """Assemble the bilinear form of P + q over the mesh's dof space.

    Dispatches on the mesh kind: radial meshes get the spectral-Galerkin
    assembly, disk meshes the kernel finite element assembly.  The potential
    must be cellwise on the interior region within its declared bound.
    """
    if not spec.all_coeffs_positive():
        raise DomainError("well-posedness requires positive term coefficients")
    q = q if isinstance(q, msh.Potential) else msh.Potential(values=q, bound=float(np.max(np.abs(q))))
    q.check_support(mesh)
    if mesh.kind == "radial":
        parts = assemble_radial(mesh, spec, q, lam_max=options.pop("lam_max", None))
    else:
        from .fem import assemble_disk
        parts = assemble_disk(mesh, spec, q, **options)

    ndof = parts["kinetic"].shape[0]
    dofs = parts["dofs"]
    tags = np.asarray(mesh.vertex_tags, dtype=object)[dofs]
    interior = np.flatnonzero(tags == msh.OMEGA)
    exterior = np.flatnonzero(tags != msh.OMEGA)
    node_cells = parts["node_cells"]
    cell_tags = np.asarray(mesh.cell_tags, dtype=object)
    parts["omega_node_mask"] = cell_tags[node_cells] == msh.OMEGA

    sys = StiffnessSystem(
        mesh=mesh, spec=spec, q=q,
        matrix=parts["kinetic"] + parts["q_gram"],
        mass=parts["mass"],
        dofs=dofs, interior=interior, exterior=exterior,
        backend=parts,
    )
    sys.coercivity_check()
    return sys


def solve_exterior(sys, mesh, spec, q, f, forcing=None):
    """Solve with exterior datum f; returns vertex values and residual.

    ``f`` is a full vertex-value array or a callable of the geodesic radius;
    only its values on exterior dofs matter (the interior entries belong to
    the quotient the problem ignores).  ``forcing`` is an optional callable
    of radius entering the load as an L^2 pairing.
    """
    _check_same_problem(sys, mesh, spec, q)
    data = _vertex_vector(mesh, f)
    u_dof = np.zeros(sys.dofs.size)
    u_dof[sys.exterior] = data[sys.dofs][sys.exterior]

    rhs = -(sys.matrix[np.ix_(sys.interior, sys.exterior)] @ u_dof[sys.exterior])
    if forcing is not None:
        load_nodes = np.asarray(forcing(sys.backend["quad_radii"]), dtype=float)
        rhs = rhs + sys.backend["load_from_values"](load_nodes)[sys.interior]

    u_dof[sys.interior] = scipy.linalg.cho_solve(sys._factor(), rhs)

    resid = sys.interior_matrix @ u_dof[sys.interior] - rhs
    scale = np.linalg.norm(rhs) + np.linalg.norm(sys.interior_matrix, ord="fro") * np.linalg.norm(u_dof[sys.interior])
    rel = float(np.linalg.norm(resid) / max(scale, 1e-300))
    if rel > RESIDUAL_TOLERANCE:
        svals = scipy.linalg.svdvals(sys.interior_matrix)
        raise SingularSystemError(
            f"solve residual {rel:.3e} exceeds tolerance; smallest singular value "
            f"{svals[-1]:.3e} against largest {svals[0]:.3e}"
        )

    vertex_values = np.zeros(mesh.num_vertices)
    vertex_values[sys.dofs] = u_dof
    return DiscreteSolution(mesh=mesh, vertex_values=vertex_values,
                            data_values=data, residual=rel)


# ---------------------------------------------------------------------------
# exterior data bases and the measurement map
# ---------------------------------------------------------------------------

def _van_der_corput(count):
    out = np.empty(count)
    for m in range(count):
        x, denom, k = 0.0, 1.0, m + 1
        while k:
            denom *= 2.0
            k, bit = divmod(k, 2)
            x += bit / denom
        out[m] = x
    return out


def window_bump_basis(mesh, tag, count, width=None):
    """`count` bump data vectors supported on the vertices of one window.

    Centers follow the bit-reversal sequence over the window, so any prefix
    of the returned family is itself well spread and enriching a family from
    8 to 16 to 32 keeps the earlier spans nested (the first vectors do not
    move).  Each bump is a Gaussian times a bubble vanishing at the window
    ends, sampled at the window's vertices and zero elsewhere.
    """
    idx = mesh.vertex_indices(tag)
    if idx.size == 0:
        raise DomainError(f"window {tag!r} has no vertices")
    r = mesh.radii[idx]
    a, b = float(r.min()), float(r.max())
    if b <= a:
        raise DomainError(f"window {tag!r} is a single vertex; refine the mesh")
    centers = a + (b - a) * _van_der_corput(count)
    sigma = width if width is not None else (b - a) / 6.0
    basis = np.zeros((count, mesh.num_vertices))
    bubble = np.clip((r - a) * (b - r) / (0.25 * (b - a) ** 2), 0.0, None)
    for k, c in enumerate(centers):
        basis[k, idx] = np.exp(-0.5 * ((r - c) / sigma) ** 2) * bubble
    return basis


def _check_exterior_support(mesh, basis, name):
    tags = np.asarray(mesh.vertex_tags, dtype=object)
    bad = (np.asarray(basis) != 0.0) & (tags == msh.OMEGA)[None, :]
    if np.any(bad):
        raise DomainError(f"{name} basis has support on interior vertices")


@dataclass
class DNMatrix:
    """Measurement map entries Lambda[j, i] = B_q(u_{f_i}, g_j).

    ``alt_matrix`` holds the same entries recomputed through the operator
    characterization (pair P u_f against g with independent quadrature);
    the gap between the two is the internal consistency measure.
    """

    matrix: np.ndarray
    alt_matrix: np.ndarray = None
    same_basis: bool = False

    def symmetry_gap(self):
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise DomainError("symmetry needs a square measurement matrix")
        return float(np.linalg.norm(self.matrix - self.matrix.T)
                     / max(np.linalg.norm(self.matrix), 1e-300))

    def route_gap(self):
        if self.alt_matrix is None:
            raise DomainError("second route was not assembled")
        return float(np.linalg.norm(self.matrix - self.alt_matrix)
                     / max(np.linalg.norm(self.matrix), 1e-300))

    def save_csv(self, path):
        np.savetxt(path, self.matrix, fmt="%.17g", delimiter=",")


def load_dn_csv(path):
    return DNMatrix(matrix=np.atleast_2d(np.loadtxt(path, delimiter=",")))


def assemble_dn(mesh, spec, q, basis_w1, basis_w2, sys=None, compare_routes=True):
    """Measurement matrix over exterior bases on the two windows.

    Solves once per column datum, then pairs through the assembled bilinear
    form; when ``compare_routes`` is set the entries are recomputed through
    the transform-side pairing with independent quadrature and stored in
    ``alt_matrix``.
    """
    basis_w1 = np.atleast_2d(np.asarray(basis_w1, dtype=float))
    basis_w2 = np.atleast_2d(np.asarray(basis_w2, dtype=float))
    _check_exterior_support(mesh, basis_w1, "data")
    _check_exterior_support(mesh, basis_w2, "test")
    if sys is None:
        if mesh.kind == "radial" and mesh.n == 3:
            # the two pairing routes only agree once the stiffness entries
            # themselves are converged in lambda, so the default system is
            # assembled with a wider window than a plain solve needs
            sys = assemble_B_q(mesh, spec, q, lam_max=dn_lambda_max(spec))
        else:
            sys = assemble_B_q(mesh, spec, q)
    else:
        _check_same_problem(sys, mesh, spec, q)

    sols = [solve_exterior(sys, mesh, spec, q, f) for f in basis_w1]
    U = np.stack([s.vertex_values[sys.dofs] for s in sols], axis=1)
    G = basis_w2[:, sys.dofs]
    matrix = G @ (sys.matrix @ U)

    alt = None
    if compare_routes:
        pair = sys.backend["pair_exterior"]
        alt = np.array([[pair(s.vertex_values, g) for s in sols] for g in basis_w2])
    same = basis_w1.shape == basis_w2.shape and np.allclose(basis_w1, basis_w2)
    return DNMatrix(matrix=matrix, alt_matrix=alt, same_basis=same)
