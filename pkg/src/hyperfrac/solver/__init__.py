"""Exterior-value solver: meshes, assembly backends, and the measurement map."""

from .mesh import (
    EXTERIOR,
    FAR,
    OMEGA,
    W1,
    W2,
    Mesh,
    Potential,
    build_mesh,
    load_mesh,
    save_mesh,
)
from .radial import assemble_radial, hat_transform_exact, reference_pair_entries
from .system import (
    DiscreteSolution,
    DNMatrix,
    StiffnessSystem,
    assemble_B_q,
    assemble_dn,
    load_dn_csv,
    solve_exterior,
    window_bump_basis,
)

__all__ = [
    "EXTERIOR",
    "FAR",
    "OMEGA",
    "W1",
    "W2",
    "Mesh",
    "Potential",
    "build_mesh",
    "load_mesh",
    "save_mesh",
    "assemble_radial",
    "hat_transform_exact",
    "reference_pair_entries",
    "DiscreteSolution",
    "DNMatrix",
    "StiffnessSystem",
    "assemble_B_q",
    "assemble_dn",
    "load_dn_csv",
    "solve_exterior",
    "window_bump_basis",
]
