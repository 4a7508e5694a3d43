"""Meshes for the exterior-value problem on a computational ball.

Two mesh kinds share one container:

``radial``
    A partition of [0, R] into intervals; vertices are radii.  Together with
    the radial transform machinery this discretizes rotation-invariant
    problems on H^2 or H^3 at one-dimensional cost.

``disk``
    A triangulation of the geodesic ball B_R in H^2, built in Klein
    coordinates where geodesics are straight lines, so flat triangles are
    geodesically convex and piecewise-linear elements make sense.  Vertices
    sit on concentric circles whose angular counts grow like sinh(r);
    adjacent rings are stitched by the classical two-pointer sweep, which is
    deterministic and conforming by construction.

Regions are concentric by design: a geodesic ball OMEGA around the base
point, two disjoint exterior annuli W1 and W2 where data and measurements
live, a FAR collar absorbing the truncation at radius R, and plain EXTERIOR
in between.  Region tags are stored per vertex and per cell.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .. import geometry as geo
from ..errors import DomainError, GeometryError

OMEGA = "omega"
EXTERIOR = "exterior"
W1 = "w1"
W2 = "w2"
FAR = "far"

ALL_TAGS = (OMEGA, EXTERIOR, W1, W2, FAR)

# hyperbolic triangles thinner than this (radians) indicate a broken mesh
MIN_TRIANGLE_ANGLE = 0.08


def _klein_to_hyperboloid(u):
    """Klein coordinates |u| < 1 (shape (..., 2)) to hyperboloid points."""
    u = np.asarray(u, dtype=float)
    s2 = np.sum(u**2, axis=-1)
    if np.any(s2 >= 1.0):
        raise GeometryError("Klein coordinates must lie strictly inside the unit disk")
    x0 = 1.0 / np.sqrt(1.0 - s2)
    return np.concatenate([x0[..., None], u * x0[..., None]], axis=-1)


def _hyperboloid_to_klein(x):
    x = np.asarray(x, dtype=float)
    return x[..., 1:] / x[..., :1]


def pairwise_distance(x, y):
    """Geodesic distances between two stacks of hyperboloid points.

    ``x`` has shape (..., n+1), ``y`` shape (m, n+1); the result broadcasts
    to (..., m).  Uses the same arsinh form as geometry.distance so nearby
    points do not lose digits to cancellation.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = x[..., None, :] - y[None, :, :]
    q = np.sum(diff[..., 1:] ** 2, axis=-1) - diff[..., 0] ** 2
    return 2.0 * np.arcsinh(0.5 * np.sqrt(np.maximum(q, 0.0)))


@dataclass
class Mesh:
    """Conforming mesh of the computational ball B_R with region tags.

    ``vertices`` are hyperboloid coordinates, shape (nv, n+1).  ``cells``
    are index pairs (radial) or triples (disk).  For radial meshes the
    geodesic radii are precomputed in ``radii``.
    """

    kind: str
    n: int
    R: float
    vertices: np.ndarray
    cells: np.ndarray
    vertex_tags: list
    cell_tags: list
    radii: np.ndarray = field(default=None, repr=False)
    h_min: float = field(default=0.0)
    h_max: float = field(default=0.0)

    def __post_init__(self):
        geo.check_dimension(self.n)
        if self.kind not in ("radial", "disk"):
            raise DomainError(f"unknown mesh kind {self.kind!r}")
        if self.kind == "disk" and self.n != 2:
            raise DomainError("disk meshes are two-dimensional")
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.cells = np.asarray(self.cells, dtype=int)
        if len(self.vertex_tags) != self.num_vertices or len(self.cell_tags) != self.num_cells:
            raise GeometryError("tag lists do not match mesh sizes")
        bad = (set(self.vertex_tags) | set(self.cell_tags)) - set(ALL_TAGS)
        if bad:
            raise GeometryError(f"unknown region tags: {sorted(bad)}")
        self.radii = np.arccosh(np.maximum(self.vertices[:, 0], 1.0))
        self._validate()

    # -- structure ---------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def vertex_indices(self, tag):
        return np.array([i for i, t in enumerate(self.vertex_tags) if t == tag], dtype=int)

    def cell_indices(self, tag):
        return np.array([i for i, t in enumerate(self.cell_tags) if t == tag], dtype=int)

    def edge_lengths(self):
        """Geodesic lengths of all cell edges, shape (num_cells, edges_per_cell)."""
        v = self.vertices
        if self.kind == "radial":
            a, b = self.cells[:, 0], self.cells[:, 1]
            return np.abs(self.radii[b] - self.radii[a])[:, None]
        out = np.empty((self.num_cells, 3))
        for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
            diff = v[self.cells[:, i]] - v[self.cells[:, j]]
            q = np.sum(diff[:, 1:] ** 2, axis=1) - diff[:, 0] ** 2
            out[:, k] = 2.0 * np.arcsinh(0.5 * np.sqrt(np.maximum(q, 0.0)))
        return out

    def triangle_angles(self):
        """Interior hyperbolic angles per triangle via the law of cosines."""
        if self.kind != "disk":
            raise DomainError("angles are defined for disk meshes")
        L = self.edge_lengths()
        angles = np.empty_like(L)
        for k in range(3):
            a, b, c = L[:, k], L[:, (k + 1) % 3], L[:, (k + 2) % 3]
            num = np.cosh(b) * np.cosh(c) - np.cosh(a)
            den = np.sinh(b) * np.sinh(c)
            angles[:, (k + 2) % 3] = np.arccos(np.clip(num / den, -1.0, 1.0))
        return angles

    def _validate(self):
        if self.num_cells == 0:
            raise GeometryError("mesh has no cells")
        L = self.edge_lengths()
        if np.any(L <= 0):
            raise GeometryError("degenerate cell: nonpositive edge length")
        self.h_min, self.h_max = float(L.min()), float(L.max())

        omega_cells = self.cell_indices(OMEGA)
        for tag in (OMEGA, W1, W2):
            if len(self.vertex_indices(tag)) == 0:
                raise GeometryError(f"region {tag!r} is empty")
        cell_r = self.radii[self.cells].max(axis=1)
        if omega_cells.size and cell_r[omega_cells].max() >= self.R:
            raise GeometryError("an interior cell touches the truncation boundary")

        if self.kind == "radial":
            order = np.argsort(self.radii)
            if not np.array_equal(order, np.arange(self.num_vertices)):
                raise GeometryError("radial vertices must be sorted by radius")
            if not (np.array_equal(self.cells[:, 0], np.arange(self.num_cells))
                    and np.array_equal(self.cells[:, 1], np.arange(1, self.num_cells + 1))):
                raise GeometryError("radial cells must tile [0, R] in order")
        else:
            angles = self.triangle_angles()
            if angles.min() < MIN_TRIANGLE_ANGLE:
                raise GeometryError(
                    f"triangle quality too low: min angle {angles.min():.4f} rad"
                )
            edges = {}
            for c, tri in enumerate(self.cells):
                for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                    key = (min(e), max(e))
                    edges[key] = edges.get(key, 0) + 1
            if max(edges.values()) > 2:
                raise GeometryError("non-conforming mesh: edge shared by > 2 triangles")

    # -- quadrature --------------------------------------------------------

    def cell_rule(self, order="low"):
        """Quadrature nodes, volume weights, and P1 basis values per cell.

        Returns (points, weights, basis) with points (nc, nq, n+1) hyperboloid
        coordinates, weights (nc, nq) including the metric volume element, and
        basis (nq, verts_per_cell) the P1 values at the nodes (cell-independent
        in barycentric/reference coordinates).
        """
        if self.kind == "radial":
            return self._interval_rule(4 if order == "low" else 8)
        return self._triangle_rule(order)

    def _interval_rule(self, nq):
        x, w = np.polynomial.legendre.leggauss(nq)
        x = 0.5 * (x + 1.0)
        w = 0.5 * w
        ra = self.radii[self.cells[:, 0]][:, None]
        rb = self.radii[self.cells[:, 1]][:, None]
        r = ra + (rb - ra) * x[None, :]
        weights = (rb - ra) * w[None, :] * geo.volume_weight(r, self.n) * geo.sphere_area(self.n)
        axis = np.zeros(self.n)
        axis[-1] = 1.0
        pts = np.zeros(r.shape + (self.n + 1,))
        pts[..., 0] = np.cosh(r)
        pts[..., -1] = np.sinh(r)
        basis = np.stack([1.0 - x, x], axis=1)
        return pts, weights, basis

    _TRI_LOW = (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
                np.array([1 / 3, 1 / 3, 1 / 3]))
    _TRI_HIGH = (np.array(
        [[1 / 3, 1 / 3, 1 / 3],
         [0.059715871789770, 0.470142064105115, 0.470142064105115],
         [0.470142064105115, 0.059715871789770, 0.470142064105115],
         [0.470142064105115, 0.470142064105115, 0.059715871789770],
         [0.797426985353087, 0.101286507323456, 0.101286507323456],
         [0.101286507323456, 0.797426985353087, 0.101286507323456],
         [0.101286507323456, 0.101286507323456, 0.797426985353087]]),
        np.array([0.225,
                  0.132394152788506, 0.132394152788506, 0.132394152788506,
                  0.125939180544827, 0.125939180544827, 0.125939180544827]))

    def _triangle_rule(self, order):
        bary, wref = self._TRI_LOW if order == "low" else self._TRI_HIGH
        klein = _hyperboloid_to_klein(self.vertices)
        tri = klein[self.cells]                      # (nc, 3, 2)
        pts_k = np.einsum("qb,cbk->cqk", bary, tri)  # (nc, nq, 2)
        # flat Jacobian of the affine map, times the metric area density
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        dens = (1.0 - np.sum(pts_k**2, axis=-1)) ** -1.5
        weights = area[:, None] * wref[None, :] * dens
        return _klein_to_hyperboloid(pts_k), weights, bary.copy()


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _region_of(r, cfg):
    if r < cfg["omega_radius"]:
        return OMEGA
    if cfg["w1"][0] <= r <= cfg["w1"][1]:
        return W1
    if cfg["w2"][0] <= r <= cfg["w2"][1]:
        return W2
    if r >= cfg["far_start"]:
        return FAR
    return EXTERIOR


def _check_regions(cfg):
    a = cfg["omega_radius"]
    w1, w2 = cfg["w1"], cfg["w2"]
    R, far = cfg["R"], cfg["far_start"]
    if not 0 < a < R:
        raise GeometryError("the interior ball must sit strictly inside B_R")
    for name, w in (("w1", w1), ("w2", w2)):
        if not (len(w) == 2 and a < w[0] < w[1] < R):
            raise GeometryError(f"window {name} must be a nonempty annulus in the exterior")
    lo, hi = (w1, w2) if w1[0] <= w2[0] else (w2, w1)
    if hi[0] <= lo[1]:
        raise GeometryError("w1 and w2 overlap")
    if not max(w1[1], w2[1]) < far <= R:
        raise GeometryError("the far collar must lie beyond both windows")


def build_mesh(config):
    """Build a tagged mesh from a plain configuration mapping.

    Required keys: kind ('radial' or 'disk'), R, h.  Optional: n (radial
    only, default 3), omega_radius (1.0), w1 ([1.2, 1.5]), w2 ([1.7, 2.0]),
    far_start (R - 1), breakpoints (extra radii forced onto the vertex set,
    e.g. the support radius of a piecewise potential).  Region boundaries
    always coincide with mesh vertices, so every cell lies in exactly one
    region.
    """
    cfg = {
        "kind": config.get("kind", "radial"),
        "n": int(config.get("n", 3 if config.get("kind", "radial") == "radial" else 2)),
        "R": float(config["R"]),
        "h": float(config["h"]),
        "omega_radius": float(config.get("omega_radius", 1.0)),
        "w1": [float(v) for v in config.get("w1", (1.2, 1.5))],
        "w2": [float(v) for v in config.get("w2", (1.7, 2.0))],
        "breakpoints": [float(v) for v in config.get("breakpoints", ())],
    }
    cfg["far_start"] = float(config.get("far_start", cfg["R"] - 1.0))
    if cfg["h"] <= 0:
        raise GeometryError("mesh size h must be positive")
    _check_regions(cfg)
    if cfg["kind"] == "radial":
        return _build_radial(cfg)
    if cfg["kind"] == "disk":
        return _build_disk(cfg)
    raise DomainError(f"unknown mesh kind {cfg['kind']!r}")


def _segment_radii(cfg):
    extra = [b for b in cfg.get("breakpoints", ()) if 0.0 < b < cfg["R"]]
    breaks = sorted({0.0, cfg["omega_radius"], *cfg["w1"], *cfg["w2"],
                     cfg["far_start"], cfg["R"], *extra})
    radii = [0.0]
    for a, b in zip(breaks[:-1], breaks[1:]):
        m = max(1, int(math.ceil((b - a) / cfg["h"] - 1e-12)))
        radii.extend(a + (b - a) * (k + 1) / m for k in range(m))
    return np.array(radii)


def _build_radial(cfg):
    r = _segment_radii(cfg)
    nv = r.size
    verts = np.zeros((nv, cfg["n"] + 1))
    verts[:, 0] = np.cosh(r)
    verts[:, -1] = np.sinh(r)
    cells = np.column_stack([np.arange(nv - 1), np.arange(1, nv)])
    vtags = [_region_of(x, cfg) for x in r]
    ctags = [_region_of(0.5 * (r[i] + r[i + 1]), cfg) for i in range(nv - 1)]
    return Mesh(kind="radial", n=cfg["n"], R=cfg["R"], vertices=verts, cells=cells,
                vertex_tags=vtags, cell_tags=ctags)


def _build_disk(cfg):
    ring_r = _segment_radii(cfg)
    h = cfg["h"]
    klein = [np.zeros((1, 2))]
    ring_slices = [(0, 1)]
    ring_radius = [0.0]
    start = 1
    for j, r in enumerate(ring_r[1:], start=1):
        m = max(6, int(math.ceil(2.0 * math.pi * math.sinh(r) / h)))
        # stagger alternate rings so the stitched triangles stay fat
        theta = 2.0 * math.pi * (np.arange(m) + 0.5 * (j % 2)) / m
        klein.append(math.tanh(r) * np.column_stack([np.cos(theta), np.sin(theta)]))
        ring_slices.append((start, start + m))
        ring_radius.extend([r] * m)
        start += m
    klein = np.vstack(klein)

    cells = []
    for j in range(len(ring_slices) - 1):
        a0, a1 = ring_slices[j]
        b0, b1 = ring_slices[j + 1]
        cells.extend(_stitch_rings(np.arange(a0, a1), np.arange(b0, b1), klein))
    cells = np.asarray(cells, dtype=int)

    verts = _klein_to_hyperboloid(klein)
    # classify by the exact ring radius: the chart round trip perturbs radii
    # at machine precision, which must not flip vertices across a region
    # boundary that a ring sits on
    vtags = [_region_of(x, cfg) for x in ring_radius]
    centroids = klein[cells].mean(axis=1)
    cr = np.arccosh(1.0 / np.sqrt(1.0 - np.sum(centroids**2, axis=1)))
    ctags = [_region_of(x, cfg) for x in cr]
    return Mesh(kind="disk", n=2, R=cfg["R"], vertices=verts, cells=cells,
                vertex_tags=vtags, cell_tags=ctags)


def _stitch_rings(inner, outer, klein):
    """Conforming triangle strip between two concentric vertex rings."""
    ang = lambda idx: np.arctan2(klein[idx, 1], klein[idx, 0])
    if inner.size == 1:
        return [(inner[0], outer[k], outer[(k + 1) % outer.size])
                for k in range(outer.size)]
    ai = np.unwrap(np.sort(ang(inner)))
    inner = inner[np.argsort(ang(inner))]
    outer = outer[np.argsort(ang(outer))]
    ao = np.sort(ang(outer))
    tris = []
    i = j = 0
    # advance whichever ring's next vertex comes first in angle; each step
    # emits one triangle, ending when both pointers have wrapped around
    while i < inner.size or j < outer.size:
        next_i = ai[(i + 1) % inner.size] + (2 * math.pi if i + 1 >= inner.size else 0)
        next_j = ao[(j + 1) % outer.size] + (2 * math.pi if j + 1 >= outer.size else 0)
        vi, vo = inner[i % inner.size], outer[j % outer.size]
        if (next_i <= next_j and i < inner.size) or j >= outer.size:
            tris.append((vi, vo, inner[(i + 1) % inner.size]))
            i += 1
        else:
            tris.append((vi, vo, outer[(j + 1) % outer.size]))
            j += 1
    return tris


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

@dataclass
class Potential:
    """Cellwise-constant potential supported on the interior region.

    ``values`` has one entry per mesh cell; entries on non-interior cells
    must vanish.  ``bound`` is the declared sup bound.
    """

    values: np.ndarray
    bound: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("potential values must be finite")
        if np.max(np.abs(self.values), initial=0.0) > self.bound + 1e-14:
            raise DomainError("potential exceeds its declared sup bound")

    @classmethod
    def zero(cls, mesh):
        return cls(values=np.zeros(mesh.num_cells), bound=0.0)

    @classmethod
    def ball(cls, mesh, radius, amplitude=1.0):
        """amplitude on interior cells whose centroid lies within ``radius``."""
        mid = mesh.radii[mesh.cells].mean(axis=1)
        vals = np.zeros(mesh.num_cells)
        inside = (mid < radius) & (np.asarray(mesh.cell_tags) == OMEGA)
        if not inside.any():
            raise DomainError("no interior cells inside the requested ball")
        vals[inside] = amplitude
        return cls(values=vals, bound=abs(amplitude))

    def check_support(self, mesh):
        off = [t != OMEGA and v != 0.0 for t, v in zip(mesh.cell_tags, self.values)]
        if any(off):
            raise DomainError("potential must vanish outside the interior region")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_mesh(mesh, path):
    doc = {
        "kind": mesh.kind,
        "n": mesh.n,
        "R": mesh.R,
        "vertices": [[float(v) for v in row] for row in mesh.vertices],
        "cells": [[int(i) for i in row] for row in mesh.cells],
        "vertex_tags": list(mesh.vertex_tags),
        "cell_tags": list(mesh.cell_tags),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_mesh(path):
    with open(path) as fh:
        doc = json.load(fh)
    return Mesh(kind=doc["kind"], n=int(doc["n"]), R=float(doc["R"]),
                vertices=np.asarray(doc["vertices"], dtype=float),
                cells=np.asarray(doc["cells"], dtype=int),
                vertex_tags=list(doc["vertex_tags"]),
                cell_tags=list(doc["cell_tags"]))
