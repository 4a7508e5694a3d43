"""Integral identity checks, Runge-type control, and potential recovery.

Everything here sits on top of the exterior-value solver: the integral
identity ties differences of measurement maps to interior pairings of
solutions, the Runge solver drives interior targets from window data, and
the two recovery drivers (linearized and damped Gauss-Newton) invert
measurement matrices for a cellwise potential.  The sensitivity used by
both recovery drivers is the identity itself: perturbing the potential on
one cell perturbs the measurement pairing by the product of the two
solutions integrated over that cell.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    AssemblyError,
    DomainError,
    EigenvalueConditionError,
    IllConditionedError,
    LineSearchError,
    SingularSystemError,
)
from .solver import mesh as msh
from .solver.system import (
    DNMatrix,
    StiffnessSystem,
    _check_same_problem,
    _vertex_vector,
    assemble_B_q,
    assemble_dn,
    solve_exterior,
    window_bump_basis,
)

IDENTITY_GAP_GUARD = 1e-12


# ---------------------------------------------------------------------------
# the integral identity
# ---------------------------------------------------------------------------

def _exterior_only(mesh, sys, data):
    vec = _vertex_vector(mesh, data)[sys.dofs]
    out = np.zeros_like(vec)
    out[sys.exterior] = vec[sys.exterior]
    return out


def integral_identity_check(mesh, spec, q1, q2, f, g,
                            sys1=None, sys2=None, eps0=IDENTITY_GAP_GUARD):
    """Both sides of the measurement-difference identity and their gap.

    The left side pairs the difference of the two measurement maps applied
    to f against g; the right side integrates (q1 - q2) times the product
    of the two solutions over the interior region, evaluated on a
    quadrature rule independent of the assembly rule.  The gap is the
    relative disagreement, guarded so that the exactly-zero case divides
    cleanly.
    """
    if sys1 is None:
        sys1 = assemble_B_q(mesh, spec, q1)
    else:
        _check_same_problem(sys1, mesh, spec, q1)
    if sys2 is None:
        sys2 = assemble_B_q(mesh, spec, q2)
    else:
        _check_same_problem(sys2, mesh, spec, q2)

    u1 = solve_exterior(sys1, mesh, spec, q1, f)
    u1_under_q2 = solve_exterior(sys2, mesh, spec, q2, f)
    u2 = solve_exterior(sys2, mesh, spec, q2, g)

    g_dof = _exterior_only(mesh, sys1, g)
    lhs = float(g_dof @ (sys1.matrix @ u1.vertex_values[sys1.dofs])
                - g_dof @ (sys2.matrix @ u1_under_q2.vertex_values[sys2.dofs]))

    radii, w, Wmap, cells = sys1.backend["fresh_rule"]()
    u1n = Wmap @ u1.vertex_values[sys1.dofs]
    u2n = Wmap @ u2.vertex_values[sys2.dofs]
    dq = (q1.values - q2.values)[cells]
    rhs = float(np.dot(w * dq, u1n * u2n))

    gap = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + eps0)
    return lhs, rhs, gap


# ---------------------------------------------------------------------------
# Runge-type control of interior targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RungeProblem:
    """Interior target with the exterior window allowed to drive it."""

    target: object
    window: str = msh.W1
    tol: float = 1e-2

    def __post_init__(self):
        if not self.tol > 0:
            raise DomainError("tolerance must be positive")
        if self.window == msh.OMEGA:
            raise DomainError("the control window must be an exterior region")


@dataclass
class RungeResult:
    coefficients: np.ndarray
    basis: np.ndarray
    achieved_error: float
    target_norm: float
    condition_number: float

    @property
    def relative_error(self):
        return self.achieved_error / self.target_norm if self.target_norm > 0 \
            else self.achieved_error


def _target_at_nodes(problem, mesh, radii, cells):
    t = problem.target
    if callable(t):
        return np.asarray(t(radii), dtype=float)
    vals = np.asarray(t, dtype=float)
    if vals.shape != (mesh.num_cells,):
        raise DomainError("cellwise target must give one value per cell")
    return vals[cells]


def runge_approximate(problem, mesh, spec, q, controls=8, beta=1e-10,
                      sys=None):
    """Least-squares control of an interior target from one window.

    Solves for window data minimizing the interior misfit plus a small
    coefficient penalty; the window basis is prefix-nested, so enriching
    the controls never discards the earlier span and the achieved misfit
    is monotone under enrichment up to the penalty.
    """
    if sys is None:
        sys = assemble_B_q(mesh, spec, q)
    else:
        _check_same_problem(sys, mesh, spec, q)
    if beta <= 0:
        raise DomainError("coefficient penalty must be positive")
    basis = window_bump_basis(mesh, problem.window, controls)

    w = sys.backend["quad_w"]
    mask = sys.backend["omega_node_mask"]
    wm = w[mask]
    cols = []
    for vec in basis:
        sol = solve_exterior(sys, mesh, spec, q, vec)
        cols.append(sys.node_values(sol.vertex_values)[mask])
    A = np.stack(cols, axis=1)
    radii = sys.backend["quad_radii"]
    phi = _target_at_nodes(problem, mesh, radii,
                           sys.backend["node_cells"])[mask]

    gram = A.T @ (wm[:, None] * A)
    rhs = A.T @ (wm * phi)
    scale = float(np.max(np.abs(np.diag(gram))))
    if not scale > 0:
        raise IllConditionedError("control solutions vanish on the interior")
    H = gram + beta * scale * np.eye(controls)
    try:
        coeff = scipy.linalg.solve(H, rhs, assume_a="pos")
    except scipy.linalg.LinAlgError:
        svals = scipy.linalg.svdvals(gram)
        raise IllConditionedError(
            "regularized control system is numerically singular; control "
            f"spectrum runs {svals[0]:.3e} down to {svals[-1]:.3e}"
        ) from None
    svals = scipy.linalg.svdvals(gram)
    cond = float(svals[0] / max(svals[-1] + beta * scale, 1e-300))

    resid = A @ coeff - phi
    err = float(np.sqrt(np.dot(wm, resid**2)))
    tnorm = float(np.sqrt(np.dot(wm, phi**2)))
    return RungeResult(coefficients=coeff, basis=basis, achieved_error=err,
                       target_norm=tnorm, condition_number=cond)


# ---------------------------------------------------------------------------
# linearized (Born) recovery
# ---------------------------------------------------------------------------

@dataclass
class BornReport:
    potential: msh.Potential
    beta: float
    misfit: float
    data_norm: float
    singular_values: np.ndarray


def _sensitivity_matrix(mesh, sys, sols_data, sols_test, omega_cells):
    """Rows pair one data solution with one test solution; columns are the
    interior cells.  Entry = integral of the solution product over the cell,
    the exact first variation of the measurement pairing in the potential."""
    nodes_data = [sys.node_values(s.vertex_values) for s in sols_data]
    nodes_test = [sys.node_values(s.vertex_values) for s in sols_test]
    rows = []
    for gt in nodes_test:
        for uf in nodes_data:
            rows.append(sys.cell_integrals(uf * gt)[omega_cells])
    return np.asarray(rows)


def born_recover(dn_gap, mesh, spec, basis_w1, basis_w2,
                 beta=None, noise_floor=0.0, sys0=None):
    """Potential from a measurement-difference matrix, linearized at zero.

    The identity at background zero reads: entry (j, i) of the difference
    equals the integral of q times the product of the background solutions.
    That is linear in the cell values of q and is solved by Tikhonov least
    squares, halving the weight until the data misfit falls under one and a
    half times the declared noise floor (or the weight bottoms out).
    """
    gap = dn_gap.matrix if isinstance(dn_gap, DNMatrix) else np.atleast_2d(dn_gap)
    zero = msh.Potential.zero(mesh)
    if sys0 is None:
        sys0 = assemble_B_q(mesh, spec, zero)
    else:
        _check_same_problem(sys0, mesh, spec, zero)
    basis_w1 = np.atleast_2d(np.asarray(basis_w1, dtype=float))
    basis_w2 = np.atleast_2d(np.asarray(basis_w2, dtype=float))
    if gap.shape != (basis_w2.shape[0], basis_w1.shape[0]):
        raise DomainError("measurement difference does not match the bases")

    sols_f = [solve_exterior(sys0, mesh, spec, zero, v) for v in basis_w1]
    sols_g = [solve_exterior(sys0, mesh, spec, zero, v) for v in basis_w2]
    omega_cells = np.flatnonzero(np.asarray(mesh.cell_tags, dtype=object) == msh.OMEGA)
    S = _sensitivity_matrix(mesh, sys0, sols_f, sols_g, omega_cells)
    d = gap.ravel()

    U, sv, Vh = scipy.linalg.svd(S, full_matrices=False)
    if not sv[0] > 0 or not np.isfinite(sv[0]):
        raise IllConditionedError(
            f"sensitivity matrix is degenerate; spectrum head {sv[:5]}"
        )
    proj = U.T @ d
    dnorm = float(np.linalg.norm(d))

    def attempt(b):
        qc = Vh.T @ (sv / (sv**2 + b) * proj)
        return qc, float(np.linalg.norm(S @ qc - d))

    if beta is None:
        b = float(sv[0] ** 2)
        floor = 1e-14 * float(sv[0] ** 2)
        qc, misfit = attempt(b)
        while misfit > 1.5 * noise_floor and b > floor:
            b *= 0.5
            qc, misfit = attempt(b)
    else:
        if beta <= 0:
            raise DomainError("regularization weight must be positive")
        b = float(beta)
        qc, misfit = attempt(b)

    values = np.zeros(mesh.num_cells)
    values[omega_cells] = qc
    pot = msh.Potential(values=values, bound=float(np.max(np.abs(values), initial=0.0)))
    return BornReport(potential=pot, beta=b, misfit=misfit,
                      data_norm=dnorm, singular_values=sv)


# ---------------------------------------------------------------------------
# damped Gauss-Newton recovery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryConfig:
    """Knobs of the nonlinear recovery driver."""

    beta: float = 1e-8
    max_iter: int = 20
    step_tol: float = 1e-9
    parameterization: str = "cells"

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError("regularization weight must be positive")
        if self.parameterization != "cells":
            raise DomainError("only cellwise-constant potentials are supported")


@dataclass
class RecoveryResult:
    potential: msh.Potential
    iterations: int
    objective: float
    misfit: float
    converged: bool
    log: list = field(default_factory=list)


def _system_for(mesh, spec, base_sys, q_cells):
    """Stiffness system at a new cellwise potential, reusing the assembled
    symbol part and quadrature of the base system; only the potential Gram
    block is rebuilt."""
    backend = base_sys.backend
    W = backend["quad_W"]
    w = backend["quad_w"]
    qn = q_cells[backend["node_cells"]]
    q_gram = (W.T * (w * qn)) @ W
    pot = msh.Potential(values=q_cells,
                        bound=float(np.max(np.abs(q_cells), initial=0.0)))
    pot.check_support(mesh)
    sys = StiffnessSystem(
        mesh=mesh, spec=spec, q=pot,
        matrix=backend["kinetic"] + q_gram,
        mass=base_sys.mass,
        dofs=base_sys.dofs, interior=base_sys.interior,
        exterior=base_sys.exterior, backend=backend,
    )
    try:
        sys.coercivity_check()
    except AssemblyError as exc:
        raise EigenvalueConditionError(
            f"iterate leaves the well-posed range: {exc}"
        ) from None
    return sys, pot


def _forward_dn(mesh, spec, sys, pot, basis_w1, basis_w2):
    try:
        dn = assemble_dn(mesh, spec, pot, basis_w1, basis_w2,
                         sys=sys, compare_routes=False)
    except SingularSystemError as exc:
        raise EigenvalueConditionError(
            f"forward solve failed at the iterate: {exc}"
        ) from None
    return dn.matrix


def recover_potential(dn_meas, mesh, spec, cfg, basis_w1, basis_w2,
                      q_ref=None, q_init=None, log_path=None):
    """Damped Gauss-Newton fit of a cellwise potential to measurements.

    The Jacobian never needs extra solves: by the integral identity the
    first variation of each measurement entry in the potential is the
    product of the two already-computed solutions integrated over each
    cell.  Steps are halved until the objective decreases; the objective
    is monotone over accepted steps by construction.
    """
    target = dn_meas.matrix if isinstance(dn_meas, DNMatrix) else np.atleast_2d(dn_meas)
    basis_w1 = np.atleast_2d(np.asarray(basis_w1, dtype=float))
    basis_w2 = np.atleast_2d(np.asarray(basis_w2, dtype=float))
    omega_cells = np.flatnonzero(np.asarray(mesh.cell_tags, dtype=object) == msh.OMEGA)
    ref = np.zeros(omega_cells.size) if q_ref is None \
        else np.asarray(q_ref.values, dtype=float)[omega_cells]
    qc = ref.copy() if q_init is None \
        else np.asarray(q_init.values, dtype=float)[omega_cells]

    base_sys = assemble_B_q(mesh, spec, msh.Potential.zero(mesh))

    def full(qvec):
        out = np.zeros(mesh.num_cells)
        out[omega_cells] = qvec
        return out

    def evaluate(qvec):
        sys, pot = _system_for(mesh, spec, base_sys, full(qvec))
        matrix = _forward_dn(mesh, spec, sys, pot, basis_w1, basis_w2)
        resid = matrix - target
        misfit = float(np.sum(resid**2))
        reg = cfg.beta * float(np.sum((qvec - ref) ** 2))
        return sys, pot, resid, misfit, misfit + reg

    sys, pot, resid, misfit, objective = evaluate(qc)
    records = [{"iter": 0, "objective": objective, "misfit": misfit,
                "regterm": objective - misfit, "step_norm": 0.0}]
    iterations = 0
    converged = False
    for it in range(1, cfg.max_iter + 1):
        sols_f = [solve_exterior(sys, mesh, spec, pot, v) for v in basis_w1]
        sols_g = [solve_exterior(sys, mesh, spec, pot, v) for v in basis_w2]
        J = _sensitivity_matrix(mesh, sys, sols_f, sols_g, omega_cells)
        grad = J.T @ resid.ravel() + cfg.beta * (qc - ref)
        H = J.T @ J + cfg.beta * np.eye(omega_cells.size)
        try:
            step = scipy.linalg.solve(H, -grad, assume_a="pos")
        except scipy.linalg.LinAlgError:
            raise IllConditionedError(
                "normal equations singular despite regularization"
            ) from None

        accepted = False
        scale = 1.0
        for _ in range(12):
            trial = qc + scale * step
            try:
                cand = evaluate(trial)
            except EigenvalueConditionError:
                scale *= 0.5
                continue
            if cand[4] < objective:
                sys, pot, resid, misfit, objective = cand
                qc = trial
                accepted = True
                break
            scale *= 0.5
        step_norm = float(np.linalg.norm(scale * step))
        if not accepted:
            if float(np.linalg.norm(step)) < cfg.step_tol:
                converged = True
                break
            raise LineSearchError(
                f"no descent along the Gauss-Newton direction at iterate {it}; "
                f"objective {objective:.6e}"
            )
        iterations = it
        records.append({"iter": it, "objective": objective, "misfit": misfit,
                        "regterm": objective - misfit, "step_norm": step_norm})
        if step_norm < cfg.step_tol:
            converged = True
            break

    if log_path is not None:
        tmp = f"{log_path}.tmp"
        with open(tmp, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        os.replace(tmp, log_path)

    return RecoveryResult(potential=pot, iterations=iterations,
                          objective=objective, misfit=misfit,
                          converged=converged, log=records)


def write_potential_csv(path, mesh, potential):
    """Cell-indexed CSV of a cellwise potential."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("cell,value\n")
        for c, v in enumerate(potential.values):
            fh.write(f"{c},{v:.17g}\n")
    os.replace(tmp, path)


def read_potential_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1]
