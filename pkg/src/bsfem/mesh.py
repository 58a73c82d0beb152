"""Evolving simplicial bulk mesh with a tagged inner surface.

The bulk region lies between the inner surface (zero set of the level set)
and a fixed outer sphere. Inner-surface nodes follow the level set; the
remaining nodes are moved with the discrete harmonic extension of the
surface displacement.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import factorial
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import Delaunay

from . import fem
from .geometry import (LevelSetGeometry, VelocityMode, project_to_surface,
                       surface_velocity)
from .sparse import solve_spd

INTERIOR, INNER_SURFACE, OUTER_BOUNDARY = 0, 1, 2
WINDSHIELD_SIGNS = ("analysis", "section8")


class MeshGenFailure(RuntimeError):
    pass


class TangledMesh(RuntimeError):
    pass


class MeshFormatError(ValueError):
    pass


def signed_volumes(vertices, cells):
    """Signed simplex volumes (requires ``cells`` of full dimension)."""
    v = vertices[cells]
    e = v[:, 1:, :] - v[:, :1, :]
    k = cells.shape[1] - 1
    return np.linalg.det(e) / factorial(k)


@dataclass(frozen=True)
class SimplicialMesh:
    vertices: np.ndarray
    cells: np.ndarray
    inner_facets: np.ndarray
    outer_facets: np.ndarray
    vertex_tags: np.ndarray
    vol_floor: float = 0.0

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def volumes(self):
        return signed_volumes(self.vertices, self.cells)

    def moved(self, new_vertices):
        return replace(self, vertices=np.asarray(new_vertices, dtype=float))

    def check(self):
        """Raise ``ValueError`` if any structural invariant is violated."""
        vol = self.volumes()
        if vol.size and vol.min() <= 0:
            raise ValueError(f"non-positive cell volume {vol.min():.3e}")
        faces = _boundary_faces(self.cells)
        for name, facets in (("inner", self.inner_facets),
                             ("outer", self.outer_facets)):
            keys = {tuple(sorted(f)) for f in facets.tolist()}
            missing = keys - faces
            if missing:
                raise ValueError(f"{len(missing)} {name} facets are not "
                                 "faces of exactly one cell")
        inner_keys = {tuple(sorted(f)) for f in self.inner_facets.tolist()}
        per_cell = np.zeros(len(self.cells), dtype=int)
        d = self.dim
        for c, cell in enumerate(self.cells.tolist()):
            for skip in range(d + 1):
                face = tuple(sorted(cell[:skip] + cell[skip + 1:]))
                if face in inner_keys:
                    per_cell[c] += 1
        if per_cell.size and per_cell.max() > 1:
            raise ValueError("a cell has more than one face on the inner surface")
        tagged = set(np.flatnonzero(self.vertex_tags == INNER_SURFACE).tolist())
        if set(np.unique(self.inner_facets).tolist()) != tagged:
            raise ValueError("inner facet vertices differ from inner-surface tags")
        return True


def _boundary_faces(cells):
    d1 = cells.shape[1]
    faces = np.concatenate([np.delete(cells, i, axis=1) for i in range(d1)])
    faces = np.sort(faces, axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    return {tuple(f) for f in uniq[counts == 1].tolist()}


def _make_mesh(vertices, cells, inner, outer, vol_floor=None):
    cells = np.array(cells, dtype=np.int64)
    vertices = np.asarray(vertices, dtype=float)
    if cells.shape[1] == vertices.shape[1] + 1:
        vol = signed_volumes(vertices, cells)
        neg = vol < 0
        cells[neg, 0], cells[neg, 1] = cells[neg, 1].copy(), cells[neg, 0].copy()
        vol = np.abs(vol)
    else:
        raise MeshFormatError("cells must have dim + 1 vertices")
    tags = np.zeros(len(vertices), dtype=np.int8)
    inner = np.asarray(inner, dtype=np.int64).reshape(-1, vertices.shape[1])
    outer = np.asarray(outer, dtype=np.int64).reshape(-1, vertices.shape[1])
    tags[np.unique(outer)] = OUTER_BOUNDARY
    if np.intersect1d(np.unique(inner), np.unique(outer)).size:
        raise MeshFormatError("a vertex lies on both the inner and outer boundary")
    tags[np.unique(inner)] = INNER_SURFACE
    if vol_floor is None:
        vol_floor = 1e-14 * (vol.min() if vol.size else 0.0)
    return SimplicialMesh(vertices, cells, inner, outer, tags, vol_floor)


# -- built-in 2D mesher ------------------------------------------------------

def _inner_radius(g, theta, outer_radius):
    e = np.array([np.cos(theta), np.sin(theta)])
    f = lambda r: g.phi(r * e, 0.0)
    if f(0.0) >= 0:
        raise MeshGenFailure("origin is not enclosed by the inner surface")
    if f(outer_radius) <= 0:
        raise MeshGenFailure("inner surface is not strictly inside the outer ball")
    rs = np.linspace(0.0, outer_radius, 65)
    vals = np.array([f(r) for r in rs])
    k = np.flatnonzero(vals > 0)[0]
    return brentq(f, rs[k - 1], rs[k], xtol=1e-15)


def _ring_mesh(g, outer_radius, n_inner, grading):
    theta = 2 * np.pi * np.arange(n_inner) / n_inner
    rho = np.array([_inner_radius(g, th, outer_radius) for th in theta])
    inner_pts = project_to_surface(
        g, np.column_stack([rho * np.cos(theta), rho * np.sin(theta)]), 0.0)
    rbar = rho.mean()
    width = outer_radius - rbar
    if width <= 0:
        raise MeshGenFailure("degenerate annulus")
    h_in = 2 * np.pi * rbar / n_inner
    size = lambda r: h_in * (1.0 + (grading - 1.0) * (r - rbar) / width)
    s_levels = [0.0]
    while True:
        r = rbar + s_levels[-1] * width
        ds = size(r) * np.sqrt(3) / 2 / width
        if s_levels[-1] + 1.5 * ds >= 1.0:
            break
        s_levels.append(s_levels[-1] + ds)
    s_levels.append(1.0)

    rho_of = lambda th: np.interp(th, np.append(theta, 2 * np.pi),
                                  np.append(rho, rho[0]))
    points = [inner_pts]
    for k, s in enumerate(s_levels[1:], start=1):
        r = rbar + s * width
        n_k = max(n_inner, int(round(2 * np.pi * r / size(r))))
        th = 2 * np.pi * (np.arange(n_k) + 0.5 * (k % 2)) / n_k
        if s == 1.0:
            rad = np.full(n_k, outer_radius)
        else:
            base = rho_of(th)
            rad = base + s * (outer_radius - base)
        points.append(np.column_stack([rad * np.cos(th), rad * np.sin(th)]))
    n_outer = len(points[-1])
    verts = np.concatenate(points)
    n = len(verts)
    is_inner = np.zeros(n, bool)
    is_inner[:n_inner] = True
    is_outer = np.zeros(n, bool)
    is_outer[n - n_outer:] = True

    tri = Delaunay(verts).simplices
    cent = verts[tri].mean(axis=1)
    inside = is_inner[tri].all(axis=1) & (g.phi(cent, 0.0) < 0)
    tri = tri[~inside]
    area = signed_volumes(verts, tri)
    tri = tri[np.abs(area) > 1e-12 * h_in ** 2]

    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]],
                                    tri[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    on_inner = is_inner[bnd].all(axis=1)
    on_outer = is_outer[bnd].all(axis=1)
    if not np.all(on_inner | on_outer):
        raise MeshGenFailure("boundary edge joins the inner and outer curves")
    inner = bnd[on_inner]
    outer = bnd[on_outer]
    if len(inner) != n_inner or len(outer) != n_outer:
        raise MeshGenFailure("triangulation does not conform to the boundary")
    return _make_mesh(verts, tri, inner, outer)


def build_initial_mesh(g: LevelSetGeometry, outer_radius: float = 2.0,
                       resolution: Optional[int] = None, *,
                       n_inner: Optional[int] = None,
                       grading: float = 3.0) -> SimplicialMesh:
    """Graded annular triangulation of ``{phi(., 0) > 0}`` inside the disk of
    radius ``outer_radius``.

    ``resolution`` is a target number of triangles; alternatively give the
    number of inner boundary segments directly with ``n_inner``. The inner
    curve must be star-shaped with respect to the origin.
    """
    if g.dim != 2:
        raise MeshGenFailure("the built-in mesher is 2D only; read 3D meshes "
                             "from a mesh file")
    if n_inner is not None:
        if n_inner < 3:
            raise MeshGenFailure("need at least 3 inner segments")
        m = _ring_mesh(g, outer_radius, n_inner, grading)
        m.check()
        return m
    if resolution is None or resolution < 8:
        raise MeshGenFailure(f"unreachable resolution {resolution!r}")
    n = max(6, int(np.sqrt(resolution / 6.0)))
    best = None
    for _ in range(6):
        m = _ring_mesh(g, outer_radius, n, grading)
        nc = len(m.cells)
        if best is None or abs(nc - resolution) < abs(len(best.cells) - resolution):
            best = m
        if abs(nc - resolution) <= 0.05 * resolution:
            break
        n_new = max(6, int(round(n * np.sqrt(resolution / nc))))
        if n_new == n:
            break
        n = n_new
    best.check()
    return best


# -- mesh file format --------------------------------------------------------

def read_mesh(path) -> SimplicialMesh:
    """Read ``dim Nv Nc Ni No`` followed by vertex, cell, inner-facet and
    outer-facet lines (0-based, whitespace separated)."""
    try:
        lines = [ln.split() for ln in Path(path).read_text().splitlines()
                 if ln.strip() and not ln.lstrip().startswith("#")]
    except OSError as exc:
        raise MeshFormatError(f"cannot read mesh file {path}: {exc}") from exc
    if not lines or len(lines[0]) != 5:
        raise MeshFormatError("header must be: dim N_vertices N_cells N_inner N_outer")
    try:
        dim, nv, nc, ni, no = (int(v) for v in lines[0])
        body = lines[1:]
        if len(body) != nv + nc + ni + no:
            raise MeshFormatError(f"expected {nv + nc + ni + no} data lines, "
                                  f"found {len(body)}")
        verts = np.array(body[:nv], dtype=float).reshape(nv, dim)
        cells = np.array(body[nv:nv + nc], dtype=np.int64).reshape(nc, dim + 1)
        inner = np.array(body[nv + nc:nv + nc + ni], dtype=np.int64).reshape(ni, dim)
        outer = np.array(body[nv + nc + ni:], dtype=np.int64).reshape(no, dim)
    except ValueError as exc:
        raise MeshFormatError(f"malformed mesh file: {exc}") from exc
    for arr in (cells, inner, outer):
        if arr.size and (arr.min() < 0 or arr.max() >= nv):
            raise MeshFormatError("vertex index out of range")
    m = _make_mesh(verts, cells, inner, outer)
    try:
        m.check()
    except ValueError as exc:
        raise MeshFormatError(str(exc)) from exc
    return m


def write_mesh(path, m: SimplicialMesh):
    out = [f"{m.dim} {m.n_vertices} {len(m.cells)} {len(m.inner_facets)} "
           f"{len(m.outer_facets)}"]
    out += [" ".join(repr(float(c)) for c in v) for v in m.vertices]
    for arr in (m.cells, m.inner_facets, m.outer_facets):
        out += [" ".join(str(int(i)) for i in row) for row in arr]
    Path(path).write_text("\n".join(out) + "\n")


# -- surface view ------------------------------------------------------------

class SurfaceView(NamedTuple):
    vertices: np.ndarray     # (N_gamma, ambient dim)
    facets: np.ndarray       # local vertex indices
    bulk_index: np.ndarray   # surface vertex -> bulk vertex


def extract_surface(m: SimplicialMesh) -> SurfaceView:
    if len(m.inner_facets) == 0:
        return SurfaceView(np.zeros((0, m.dim)),
                           np.zeros((0, m.dim), dtype=np.int64),
                           np.zeros(0, dtype=np.int64))
    idx, local = np.unique(m.inner_facets, return_inverse=True)
    return SurfaceView(m.vertices[idx], local.reshape(m.inner_facets.shape), idx)


# -- harmonic extension -------------------------------------------------------

class _ExtensionCache:
    """Interior-interior block of the stiffness matrix for one connectivity."""

    def __init__(self, m):
        self.pattern = fem.bulk_pattern(m)
        self.free = np.flatnonzero(m.vertex_tags == INTERIOR)
        self.inner = np.flatnonzero(m.vertex_tags == INNER_SURFACE)
        self.outer = np.flatnonzero(m.vertex_tags == OUTER_BOUNDARY)


def _extension_blocks(m, cache, A=None):
    if A is None:
        A = fem.stiffness_matrix(m, cache.pattern)
    A_if = A[cache.free]
    return A_if, A_if[:, cache.free]


def _extend(m, cache, blocks, boundary_data, outer_data, x0, tol, info):
    A_if, A_ii = blocks
    u = np.zeros(m.n_vertices)
    u[cache.inner] = boundary_data
    u[cache.outer] = outer_data
    if cache.free.size == 0:
        return u
    rhs = -(A_if @ u)
    if np.linalg.norm(rhs) == 0.0:
        return u
    guess = None if x0 is None else np.asarray(x0)[cache.free]
    u[cache.free] = solve_spd(A_ii, rhs, tol=tol, x0=guess, info=info)
    return u


def harmonic_extension(m: SimplicialMesh, boundary_data, outer_data=0.0, *,
                       x0=None, tol=1e-10, cache=None, info=None):
    """Discrete P1 harmonic extension of values given on the inner surface.

    ``boundary_data`` holds one value per inner-surface vertex in ascending
    bulk index order; ``outer_data`` fixes the outer boundary (zero for mesh
    velocities). Returns a value per vertex.
    """
    cache = cache or _ExtensionCache(m)
    return _extend(m, cache, _extension_blocks(m, cache), boundary_data,
                   outer_data, x0, tol, info)


# -- motion ------------------------------------------------------------------

@dataclass
class MeshMotion:
    prev_positions: np.ndarray
    node_velocity: np.ndarray
    jump_nodal: np.ndarray
    windshield_nodal: np.ndarray   # per surface vertex, ascending bulk index

    @classmethod
    def at_rest(cls, m: SimplicialMesh):
        n_s = int(np.sum(m.vertex_tags == INNER_SURFACE))
        z = np.zeros_like(m.vertices)
        return cls(m.vertices.copy(), z, z.copy(), np.zeros(n_s))


def windshield_values(g: LevelSetGeometry, x, t, mode: VelocityMode,
                      sign="analysis"):
    """Nodal windshield coefficient on the surface.

    ``analysis`` gives ``phi_t/|grad phi|``, ``section8`` its negative;
    zero in the Lagrangian mode.
    """
    if sign not in WINDSHIELD_SIGNS:
        raise ValueError(f"unknown windshield sign {sign!r}")
    x = np.atleast_2d(x)
    if mode.lagrangian or g.stationary or len(x) == 0:
        return np.zeros(len(x))
    nrm = np.linalg.norm(g.grad(x, t), axis=1)
    j = np.atleast_1d(g.phi_t(x, t)) / nrm
    return j if sign == "analysis" else -j


def compute_motion(prev_positions, new_positions, tau, mode: VelocityMode,
                   windshield=None):
    prev_positions = np.asarray(prev_positions, dtype=float)
    vel = (np.asarray(new_positions, dtype=float) - prev_positions) / tau
    jump = np.zeros_like(vel) if mode.lagrangian else -vel
    if windshield is None:
        windshield = np.zeros(0)
    return MeshMotion(prev_positions, vel, jump, np.asarray(windshield, float))


def advance_mesh(m: SimplicialMesh, motion: Optional[MeshMotion],
                 g: LevelSetGeometry, t_old: float, tau: float,
                 mode: VelocityMode, *, windshield_sign="analysis",
                 ext_tol=1e-10, cache=None, stiffness=None):
    """Move the mesh from ``t_old`` to ``t_old + tau``.

    Surface nodes take an explicit Euler step with the kinematic surface
    velocity and are projected back onto the level set; the other nodes
    follow the harmonic extension of the surface displacement.
    ``stiffness`` may pass the already assembled P1 stiffness of ``m``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    t_new = t_old + tau
    cache = cache or _ExtensionCache(m)
    x_old = m.vertices
    new = x_old.copy()
    if not g.stationary and cache.inner.size:
        xs = x_old[cache.inner]
        moved = xs + tau * surface_velocity(g, xs, t_old)
        new[cache.inner] = project_to_surface(g, moved, t_new)
        disp = new[cache.inner] - xs
        guess = None if motion is None else tau * motion.node_velocity
        blocks = _extension_blocks(m, cache, stiffness)
        for c in range(m.dim):
            ext = _extend(m, cache, blocks, disp[:, c], 0.0,
                          None if guess is None else guess[:, c], ext_tol, None)
            new[cache.free, c] = x_old[cache.free, c] + ext[cache.free]
    m_new = m.moved(new)
    vol = m_new.volumes()
    if vol.size and vol.min() <= m.vol_floor:
        raise TangledMesh(f"cell volume {vol.min():.3e} at t={t_new:.6g}")
    wind = windshield_values(g, new[cache.inner], t_new, mode, windshield_sign)
    return m_new, compute_motion(x_old, new, tau, mode, wind)


# -- quality -----------------------------------------------------------------

class MeshQuality(NamedTuple):
    min_volume: float
    max_aspect_ratio: float
    min_facet_length: float


def aspect_ratios(vertices, cells):
    """Circumradius over ``d`` times inradius; 1 for a regular simplex."""
    v = vertices[cells]
    d = cells.shape[1] - 1
    vol = np.abs(signed_volumes(vertices, cells))
    faces = [np.delete(v, i, axis=1) for i in range(d + 1)]
    face_meas = np.stack([fem.simplex_measures(f) for f in faces], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_in = d * vol / face_meas.sum(axis=1)
        e = v[:, 1:, :] - v[:, :1, :]
        rhs = 0.5 * np.sum(e * e, axis=2)
        ok = vol > 0
        r_out = np.full(len(cells), np.inf)
        if ok.any():
            c = np.linalg.solve(e[ok], rhs[ok][..., None])[..., 0]
            r_out[ok] = np.linalg.norm(c, axis=1)
        ratio = np.where(ok, r_out / (d * r_in), np.inf)
    return ratio


def mesh_quality(m: SimplicialMesh) -> MeshQuality:
    vol = m.volumes()
    cells = m.cells
    k = cells.shape[1]
    edges = np.concatenate([cells[:, [i, j]] for i in range(k)
                            for j in range(i + 1, k)])
    lengths = np.linalg.norm(m.vertices[edges[:, 0]] - m.vertices[edges[:, 1]],
                             axis=1)
    return MeshQuality(float(vol.min()),
                       float(aspect_ratios(m.vertices, cells).max()),
                       float(lengths.min()))
