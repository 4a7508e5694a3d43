"""Kernel finite elements for the nonlocal form on an H^2 disk.

Piecewise-linear elements in Klein coordinates (affine on straight, hence
geodesic, triangles) discretize the double-integral form

    sum_k b_k (kappa_k / 2) iint (u(x)-u(y)) (v(x)-v(y)) K_{s_k}(d(x,y)) dV dV

plus the far-field compensation for y beyond the computational ball and the
potential term.  Element pairs split into two regimes:

* separated pairs: tensor Gauss rules with the kernel from a spline table;
* touching pairs (shared vertex, shared edge, or identical): the inner
  integral switches to exact geodesic polar coordinates around each outer
  quadrature point, where dV = sinh(rho) drho dtheta; each ray is clipped
  against the inner triangle in closed form through the Klein chart, and
  the radial rule is power-graded into the singularity.

The weak singularity is what makes this tractable: the difference factors
vanish on the diagonal, so after the polar substitution the integrand grows
no faster than rho^{1-2s} and a graded rule resolves it.
"""

import math

import numpy as np

from ..errors import AssemblyError, DomainError
from ..fracop import KernelTable, calibrate_kappa, _kernel_weighted_tail
from . import mesh as msh

PAIR_CHUNK = 16384
TOUCH_CHUNK = 96


def _combined_kernel(spec, tables):
    """Half-weighted kernel sum and the matching truncation tail weight."""
    coeffs = np.asarray(spec.coeffs, dtype=float)
    kappas = [calibrate_kappa(2, s).kappa for s in spec.orders]

    def half_kernel(rho):
        out = np.zeros(np.shape(rho))
        for b, kap, table in zip(coeffs, kappas, tables):
            out += 0.5 * b * kap * table(rho)
        return out

    def tail_weight(r_cut):
        return sum(
            b * kap * 2.0 * math.pi * _kernel_weighted_tail(float(r_cut), 2, s)
            for b, kap, s in zip(coeffs, kappas, spec.orders)
        )

    return half_kernel, tail_weight


def _subdivided_rule(bary, wref):
    """The reference rule mapped to the four midpoint children, expressed in
    parent barycentric coordinates (children have a quarter of the area)."""
    v = np.eye(3)
    m01, m12, m02 = 0.5 * (v[0] + v[1]), 0.5 * (v[1] + v[2]), 0.5 * (v[0] + v[2])
    children = (
        np.stack([v[0], m01, m02]),
        np.stack([m01, v[1], m12]),
        np.stack([m02, m12, v[2]]),
        np.stack([m01, m12, m02]),
    )
    out_b = np.vstack([bary @ ch for ch in children])
    out_w = np.concatenate([0.25 * wref] * 4)
    return out_b, out_w


def _triangle_nodes(mesh, order, subdivide=False):
    """Quadrature data for every cell: Klein points, hyperboloid points,
    full-measure weights (nc, nq), and the P1 basis table (nq, 3)."""
    bary, wref = msh.Mesh._TRI_HIGH if order == "high" else msh.Mesh._TRI_LOW
    if subdivide:
        bary, wref = _subdivided_rule(bary, wref)
    klein = mesh.vertices[:, 1:] / mesh.vertices[:, :1]
    tri = klein[mesh.cells]                       # (nc, 3, 2)
    pts_k = np.einsum("qb,cbk->cqk", bary, tri)   # (nc, nq, 2)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    dens = (1.0 - np.sum(pts_k**2, axis=-1)) ** -1.5
    weights = area[:, None] * wref[None, :] * dens
    x0 = 1.0 / np.sqrt(1.0 - np.sum(pts_k**2, axis=-1))
    hyp = np.concatenate([x0[..., None], pts_k * x0[..., None]], axis=-1)
    return pts_k, hyp, weights, bary


def _p1_map(mesh, vdof, ndof, order):
    """Quadrature radii, weights, P1 node-dof map, and owning cells."""
    pts_k, hyp, w, bary = _triangle_nodes(mesh, order)
    nc, nq = w.shape
    Wmap = np.zeros((nc * nq, ndof))
    rows_all = np.arange(nc * nq).reshape(nc, nq)
    for local in range(3):
        cols = vdof[mesh.cells[:, local]]
        ok = cols < ndof
        Wmap[rows_all[ok], cols[ok, None]] += bary[:, local]
    radii = np.arccosh(np.maximum(hyp[..., 0].ravel(), 1.0))
    return radii, w.ravel(), Wmap, np.repeat(np.arange(nc), nq)


def _touching_pairs(mesh):
    """Unordered cell pairs sharing at least one vertex, classed by overlap.

    Returns (self_ids, edge_pairs, vertex_pairs); edge pairs share exactly
    two vertices, vertex pairs exactly one.
    """
    by_vertex = {}
    for c, tri in enumerate(mesh.cells):
        for v in tri:
            by_vertex.setdefault(int(v), []).append(c)
    edge, vertex = set(), set()
    for cells in by_vertex.values():
        for a_i, a in enumerate(cells):
            for b in cells[a_i + 1:]:
                shared = len(set(mesh.cells[a]) & set(mesh.cells[b]))
                (edge if shared == 2 else vertex).add((min(a, b), max(a, b)))
    return (np.arange(mesh.num_cells),
            np.array(sorted(edge), dtype=int).reshape(-1, 2),
            np.array(sorted(vertex), dtype=int).reshape(-1, 2))


def _tangent_frames(X):
    """Lorentz-orthonormal tangent pairs at hyperboloid points X (..., 3)."""
    def form(a, b):
        return a[..., 0] * b[..., 0] - a[..., 1] * b[..., 1] - a[..., 2] * b[..., 2]

    e1 = np.zeros_like(X)
    e1[..., 1] = 1.0
    e1 = e1 + X[..., 1:2] * X
    e1 = e1 / np.sqrt(-form(e1, e1))[..., None]
    e2 = np.zeros_like(X)
    e2[..., 2] = 1.0
    e2 = e2 + X[..., 2:3] * X
    e2 = e2 + form(e2, e1)[..., None] * e1
    e2 = e2 / np.sqrt(-form(e2, e2))[..., None]
    return e1, e2


def _clip_rays(a, d, tri):
    """Clip Klein rays a + t d, t >= 0, against straight triangles.

    Shapes: a (..., 2), d (..., 2), tri broadcastable (..., 3, 2).  Returns
    (t_lo, t_hi); empty intersections come back with t_lo >= t_hi.
    """
    t_lo = np.zeros(np.broadcast_shapes(a.shape[:-1], d.shape[:-1]))
    t_hi = np.full_like(t_lo, np.inf)
    centroid = tri.mean(axis=-2)
    for k in range(3):
        va, vb = tri[..., k, :], tri[..., (k + 1) % 3, :]
        normal = np.stack([-(vb - va)[..., 1], (vb - va)[..., 0]], axis=-1)
        offset = np.sum(normal * va, axis=-1)
        sign = np.where(np.sum(normal * centroid, axis=-1) < offset, -1.0, 1.0)
        normal = normal * sign[..., None]
        offset = offset * sign
        denom = np.sum(normal * d, axis=-1)
        num = offset - np.sum(normal * a, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cross = num / denom
        entering = denom > 1e-300
        leaving = denom < -1e-300
        parallel_out = ~entering & ~leaving & (num > 0)
        t_lo = np.where(entering, np.maximum(t_lo, t_cross), t_lo)
        t_hi = np.where(leaving, np.minimum(t_hi, t_cross), t_hi)
        t_hi = np.where(parallel_out, -1.0, t_hi)
    return t_lo, t_hi


def _touch_blocks(mesh, half_kernel, pairs_a, pairs_b, n_theta, n_rho, gamma,
                  x_order, x_subdivide, require_cover=False):
    """Local 6x6 blocks for touching pairs via polar inner integration.

    For each outer node x in T_a the inner integral over T_b runs in exact
    geodesic polar coordinates around x; the radial rule is graded by
    rho = rho_hi * v^gamma to absorb the kernel singularity at rho = 0.
    """
    klein = mesh.vertices[:, 1:] / mesh.vertices[:, :1]
    pts_k, hyp, wx, bary_x = _triangle_nodes(mesh, x_order, subdivide=x_subdivide)
    theta = (np.arange(n_theta) + 0.5) * (2.0 * math.pi / n_theta)
    w_theta = 2.0 * math.pi / n_theta
    gl_x, gl_w = np.polynomial.legendre.leggauss(n_rho)
    gl_x = 0.5 * (gl_x + 1.0)
    gl_w = 0.5 * gl_w

    X = hyp[pairs_a]                              # (P, nq, 3)
    a = pts_k[pairs_a][:, :, None, :]             # (P, nq, 1, 2)
    tri_b = klein[mesh.cells[pairs_b]]            # (P, 3, 2)
    e1, e2 = _tangent_frames(X)
    cos_t = np.cos(theta)[None, None, :, None]
    sin_t = np.sin(theta)[None, None, :, None]
    W = cos_t * e1[:, :, None, :] + sin_t * e2[:, :, None, :]   # (P, nq, nt, 3)

    # Klein image of the geodesic ray from x with initial direction W
    X0 = X[..., 0][:, :, None]
    d = (W[..., 1:] - W[..., 0:1] * a) / X0[..., None]
    t_lo, t_hi = _clip_rays(np.broadcast_to(a, d.shape), d,
                            tri_b[:, None, None, :, :])
    valid = t_hi > t_lo + 1e-14
    if require_cover and not np.all(valid):
        raise AssemblyError("a cell failed to cover its own polar rays")

    # arclength along the ray: tanh(rho) = t x0 / (x0 - t w0)
    W0 = W[..., 0]

    def rho_of(t):
        tau = np.clip(t * X0 / (X0 - t * W0), 0.0, 1.0 - 1e-16)
        return np.arctanh(tau)

    rho_lo = np.where(valid, rho_of(np.where(valid, t_lo, 0.0)), 0.0)
    rho_hi = np.where(valid, rho_of(np.where(valid, t_hi, 0.0)), 0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        v_lo = np.where(rho_hi > 0,
                        (np.maximum(rho_lo, 0.0) / np.maximum(rho_hi, 1e-300)) ** (1.0 / gamma),
                        0.0)
    v = v_lo[..., None] + (1.0 - v_lo[..., None]) * gl_x          # (P,nq,nt,nv)
    rho = np.maximum(rho_hi[..., None] * v**gamma, 1e-14)
    w_rho = (rho_hi * (1.0 - v_lo))[..., None] * gamma * v ** (gamma - 1.0) * gl_w

    Y = (np.cosh(rho)[..., None] * X[:, :, None, None, :]
         + np.sinh(rho)[..., None] * W[:, :, :, None, :])         # (P,nq,nt,nv,3)
    y_k = Y[..., 1:] / Y[..., 0:1]

    # barycentric coordinates of y within T_b through the affine chart
    M = np.concatenate([tri_b.transpose(0, 2, 1),
                        np.ones((tri_b.shape[0], 1, 3))], axis=1)
    Minv = np.linalg.inv(M)
    rhs = np.concatenate([y_k, np.ones(y_k.shape[:-1] + (1,))], axis=-1)
    bary_y = np.einsum("pij,pqtvj->pqtvi", Minv, rhs)

    inner_w = half_kernel(rho) * np.sinh(rho) * w_rho * w_theta * valid[..., None]

    # 6-slot difference: x side carries +bary_x, y side -bary_y; duplicated
    # vertex indices collapse correctly under additive scatter
    bx = np.broadcast_to(bary_x[None, :, None, None, :], bary_y.shape)
    delta = np.concatenate([bx, -bary_y], axis=-1)                # (...,6)
    blocks = np.einsum("pqtv,pqtvi,pqtvj,pq->pij",
                       inner_w, delta, delta, wx[pairs_a])
    if not np.all(np.isfinite(blocks)):
        raise AssemblyError("kernel quadrature failed near the diagonal")
    return blocks


def _far_blocks(half_kernel, hyp, wq, bary, ids_a, ids_b):
    """Local 6x6 blocks for separated pairs from the tensor product rule."""
    Xa, Xb = hyp[ids_a], hyp[ids_b]
    diff = Xa[:, :, None, :] - Xb[:, None, :, :]
    qq = np.sum(diff[..., 1:] ** 2, axis=-1) - diff[..., 0] ** 2
    dist = 2.0 * np.arcsinh(0.5 * np.sqrt(np.maximum(qq, 1e-300)))
    KW = wq[ids_a][:, :, None] * half_kernel(dist) * wq[ids_b][:, None, :]
    m_xx = np.einsum("pq,qi,qj->pij", KW.sum(axis=2), bary, bary)
    m_yy = np.einsum("pq,qi,qj->pij", KW.sum(axis=1), bary, bary)
    m_xy = -np.einsum("pqr,qi,rj->pij", KW, bary, bary)
    top = np.concatenate([m_xx, m_xy], axis=2)
    bot = np.concatenate([m_xy.transpose(0, 2, 1), m_yy], axis=2)
    return np.concatenate([top, bot], axis=1)


def _scatter(scratch, vdof, verts_a, verts_b, blocks):
    gi = np.concatenate([vdof[verts_a], vdof[verts_b]], axis=1)   # (P, 6)
    rows = np.repeat(gi, 6, axis=1).ravel()
    cols = np.tile(gi, (1, 6)).ravel()
    np.add.at(scratch, (rows, cols), blocks.ravel())


def assemble_disk(mesh, spec, q, _refined=False):
    """Backend parts for the kernel finite element form; same contract as
    the radial assembly.  ``_refined`` switches every quadrature rule to a
    finer variant and exists for the independent second-route evaluation.
    """
    if mesh.kind != "disk":
        raise DomainError("disk assembly requires a disk mesh")
    for s in spec.orders:
        if not 0.0 < s < 1.0:
            raise DomainError(
                f"the disk backend covers kernel orders s in (0, 1); got s = {s}"
            )
    tables = [KernelTable(2, s, points=900 if _refined else 600)
              for s in spec.orders]
    half_kernel, tail_weight = _combined_kernel(spec, tables)

    boundary = mesh.radii >= mesh.R - 1e-9
    dofs = np.flatnonzero(~boundary)
    ndof = dofs.size
    vdof = np.full(mesh.num_vertices, ndof, dtype=int)
    vdof[dofs] = np.arange(ndof)
    verts = mesh.cells
    nc = mesh.num_cells

    scratch = np.zeros((ndof + 1, ndof + 1))

    self_ids, edge_pairs, vertex_pairs = _touching_pairs(mesh)
    touch_codes = np.concatenate([
        self_ids.astype(np.int64) * nc + self_ids,
        edge_pairs[:, 0].astype(np.int64) * nc + edge_pairs[:, 1],
        vertex_pairs[:, 0].astype(np.int64) * nc + vertex_pairs[:, 1],
    ])
    iu, ju = np.triu_indices(nc)
    keep = ~np.isin(iu.astype(np.int64) * nc + ju, touch_codes)
    far_a, far_b = iu[keep], ju[keep]

    # tensor rules lose accuracy as the gap between separated triangles
    # shrinks, so pairs within a couple of diameters get the denser rule
    klein_v = mesh.vertices[:, 1:] / mesh.vertices[:, :1]
    cent_h = msh._klein_to_hyperboloid(klein_v[verts].mean(axis=1))
    vert_h = mesh.vertices[verts]
    lor_cv = (cent_h[:, None, 0] * vert_h[..., 0]
              - np.einsum("ck,cvk->cv", cent_h[:, 1:], vert_h[..., 1:]))
    size = np.arccosh(np.maximum(lor_cv, 1.0)).max(axis=1)
    lor_cc = (cent_h[far_a, 0] * cent_h[far_b, 0]
              - np.einsum("pk,pk->p", cent_h[far_a, 1:], cent_h[far_b, 1:]))
    near = lor_cc < np.cosh(2.0 * (size[far_a] + size[far_b]))

    if _refined:
        rule_bulk = _triangle_nodes(mesh, "high")
        rule_near = _triangle_nodes(mesh, "high", subdivide=True)
    else:
        rule_bulk = _triangle_nodes(mesh, "low")
        rule_near = _triangle_nodes(mesh, "high")
    # ordered pairs (T, T') and (T', T) see the same symmetric tensor rule,
    # so one evaluation scattered twice is exact, not an approximation
    for (_, hyp_r, w_r, bary_r), pa, pb, chunk in (
            (rule_bulk, far_a[~near], far_b[~near], PAIR_CHUNK),
            (rule_near, far_a[near], far_b[near], PAIR_CHUNK // 4)):
        for lo in range(0, pa.size, chunk):
            hi = min(lo + chunk, pa.size)
            blocks = _far_blocks(half_kernel, hyp_r, w_r, bary_r,
                                 pa[lo:hi], pb[lo:hi])
            _scatter(scratch, vdof, verts[pa[lo:hi]], verts[pb[lo:hi]],
                     2.0 * blocks)

    gamma = 1.0 / (1.0 - float(np.max(spec.orders)))
    if _refined:
        plans = [
            (self_ids, self_ids, 48, 10, "high", True, False),
            (edge_pairs[:, 0], edge_pairs[:, 1], 48, 10, "high", True, True),
            (vertex_pairs[:, 0], vertex_pairs[:, 1], 36, 9, "high", False,
             True),
        ]
    else:
        plans = [
            (self_ids, self_ids, 36, 9, "high", False, False),
            (edge_pairs[:, 0], edge_pairs[:, 1], 36, 9, "high", False, True),
            (vertex_pairs[:, 0], vertex_pairs[:, 1], 24, 6, "high", False,
             True),
        ]
    for pa, pb, n_theta, n_rho, x_order, subdivide, both_orders in plans:
        for lo in range(0, len(pa), TOUCH_CHUNK):
            hi = min(lo + TOUCH_CHUNK, len(pa))
            ids_a, ids_b = pa[lo:hi], pb[lo:hi]
            blocks = _touch_blocks(mesh, half_kernel, ids_a, ids_b, n_theta,
                                   n_rho, gamma, x_order, subdivide,
                                   require_cover=not both_orders)
            if both_orders:
                # the polar rule is not swap-symmetric: evaluate both orders
                swapped = _touch_blocks(mesh, half_kernel, ids_b, ids_a,
                                        n_theta, n_rho, gamma, x_order,
                                        subdivide)
                perm = np.r_[3:6, 0:3]
                blocks = blocks + swapped[:, perm][:, :, perm]
            _scatter(scratch, vdof, verts[ids_a], verts[ids_b], blocks)

    kinetic = scratch[:ndof, :ndof]
    kinetic = 0.5 * (kinetic + kinetic.T)
    if not np.all(np.isfinite(kinetic)):
        raise AssemblyError("kernel assembly produced nonfinite entries")

    quad_radii, quad_w, Wmap, node_cells = _p1_map(
        mesh, vdof, ndof, "high" if _refined else "low")
    mass = Wmap.T @ (quad_w[:, None] * Wmap)
    nq = quad_w.size // nc
    q_nodes = np.repeat(q.values, nq)
    q_gram = Wmap.T @ ((quad_w * q_nodes)[:, None] * Wmap)

    # truncation compensation: pairs with one point beyond B_R reduce to a
    # weight T(x) <= tail(R - r(x)); lump it on the diagonal with the exact
    # P1 masses so the kept form stays symmetric positive semidefinite
    lumped = Wmap.T @ quad_w
    tails = np.array([tail_weight(mesh.R - mesh.radii[v]) for v in dofs])
    kinetic = kinetic + np.diag(lumped * tails)

    parts = {
        "kinetic": kinetic,
        "mass": mass,
        "q_gram": q_gram,
        "dofs": dofs,
        "quad_radii": quad_radii,
        "quad_w": quad_w,
        "quad_W": Wmap,
        "node_cells": node_cells,
        "load_from_values": lambda vals: Wmap.T @ (quad_w * np.asarray(vals, dtype=float)),
        "fresh_rule": lambda extra_nodes=0: _p1_map(mesh, vdof, ndof, "high"),
        "lambda_max": None,
    }

    def pair_exterior(u_vertex_values, g_vertex_values):
        """Form value through an independently refined assembly (finer far
        rule, finer polar rules, subdivided outer nodes everywhere)."""
        if "_fine_kinetic" not in parts:
            fine = assemble_disk(mesh, spec, q, _refined=True)
            parts["_fine_kinetic"] = fine["kinetic"]
        u = np.asarray(u_vertex_values, dtype=float)[dofs]
        g = np.asarray(g_vertex_values, dtype=float)[dofs]
        return float(g @ (parts["_fine_kinetic"] @ u))

    parts["pair_exterior"] = pair_exterior
    return parts
