"""P1 element kernels and assembly on bulk cells and surface facets.

Element routines are batched: ``coords`` has shape ``(n_elem, k + 1, amb)``
for k-simplices embedded in ``amb``-dimensional space, so surface facets
use the same code as bulk cells (gradients are then tangential).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .sparse import CsrMatrix, CsrPattern


class DegenerateSimplex(ValueError):
    pass


def _gram(coords):
    e = coords[:, 1:, :] - coords[:, :1, :]          # (n, k, amb)
    return e, e @ e.transpose(0, 2, 1)


def simplex_measures(coords):
    coords = np.asarray(coords, dtype=float)
    k = coords.shape[1] - 1
    if k == 0:
        return np.ones(coords.shape[0])
    e = coords[:, 1:, :] - coords[:, :1, :]
    amb = coords.shape[2]
    if k == 1:
        return np.sqrt(np.sum(e[:, 0] ** 2, axis=1))
    if k == 2 and amb == 2:
        return 0.5 * np.abs(e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0])
    if k == 2 and amb == 3:
        return 0.5 * np.linalg.norm(np.cross(e[:, 0], e[:, 1]), axis=1)
    G = e @ e.transpose(0, 2, 1)
    det = np.linalg.det(G)
    return np.sqrt(np.clip(det, 0.0, None)) / factorial(k)


def _checked_measures(coords):
    meas = simplex_measures(coords)
    if meas.size == 0:
        return meas
    k = coords.shape[1] - 1
    e = coords[:, 1:, :] - coords[:, :1, :]
    scale = np.max(np.abs(e), axis=(1, 2))
    if np.any(meas <= 1e-14 * scale ** k / factorial(k)):
        raise DegenerateSimplex("simplex with zero measure")
    return meas


def local_mass(coords):
    """Exact ``int_K lambda_i lambda_j`` for every element."""
    coords = np.asarray(coords, dtype=float)
    k = coords.shape[1] - 1
    meas = _checked_measures(coords)
    ref = (np.ones((k + 1, k + 1)) + np.eye(k + 1)) * factorial(k) / factorial(k + 2)
    return meas[:, None, None] * ref


def barycentric_gradients(coords):
    """Tangential gradients of the barycentric coordinates, ``(n, k+1, amb)``."""
    coords = np.asarray(coords, dtype=float)
    e = coords[:, 1:, :] - coords[:, :1, :]
    k, amb = e.shape[1], e.shape[2]
    if k == 1:
        g1 = e[:, 0] / np.sum(e[:, 0] ** 2, axis=1)[:, None]
        grads = g1[:, None, :]
    elif k == 2 and amb == 2:
        a, b = e[:, 0], e[:, 1]
        det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        grads = np.empty_like(e)
        grads[:, 0, 0], grads[:, 0, 1] = b[:, 1] / det, -b[:, 0] / det
        grads[:, 1, 0], grads[:, 1, 1] = -a[:, 1] / det, a[:, 0] / det
    elif k == amb:
        grads = np.linalg.inv(e).transpose(0, 2, 1)
    else:
        G = e @ e.transpose(0, 2, 1)
        grads = np.linalg.solve(G, e)
    g0 = -grads.sum(axis=1, keepdims=True)
    return np.concatenate([g0, grads], axis=1)


def local_stiffness(coords):
    """Exact ``int_K grad lambda_i . grad lambda_j`` for every element."""
    meas = _checked_measures(coords)
    D = barycentric_gradients(coords)
    return meas[:, None, None] * (D @ D.transpose(0, 2, 1))


def element_mass(vertices):
    """Mass matrix of one simplex given as ``(k + 1, amb)`` vertex rows."""
    return local_mass(np.asarray(vertices, dtype=float)[None])[0]


def element_stiffness(vertices):
    return local_stiffness(np.asarray(vertices, dtype=float)[None])[0]


# -- global operators ----------------------------------------------------------

def bulk_pattern(m):
    return CsrPattern(m.cells, m.n_vertices)


def surface_pattern(surf):
    return CsrPattern(surf.facets, len(surf.vertices))


def stiffness_matrix(m, pattern=None):
    pattern = pattern or bulk_pattern(m)
    return pattern.assemble(local_stiffness(m.vertices[m.cells]))


def mass_matrix(m, pattern=None):
    pattern = pattern or bulk_pattern(m)
    return pattern.assemble(local_mass(m.vertices[m.cells]))


@dataclass(frozen=True)
class P1Space:
    """Continuous piecewise linears on a bulk or surface mesh."""

    dof_count: int
    kind: str = "bulk"
    dirichlet_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("bulk", "surface"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.kind == "surface" and self.dirichlet_mask is not None \
                and np.any(self.dirichlet_mask):
            raise ValueError("surface spaces carry no Dirichlet constraints")

    @classmethod
    def bulk(cls, m, dirichlet=False):
        from .mesh import OUTER_BOUNDARY
        mask = (m.vertex_tags == OUTER_BOUNDARY) if dirichlet else None
        return cls(m.n_vertices, "bulk", mask)

    @classmethod
    def surface(cls, surf):
        return cls(len(surf.vertices), "surface", None)


@dataclass
class AssembledOperators:
    """Operators of one mesh level. Bulk matrices share one sparsity
    pattern, as do the two surface matrices."""

    M_bulk: CsrMatrix
    A_bulk: CsrMatrix
    B_ale: CsrMatrix
    R_wind: CsrMatrix
    trace_map: np.ndarray
    M_surf: Optional[CsrMatrix] = None
    A_surf: Optional[CsrMatrix] = None
    assembler: Optional["Assembler"] = None

    def bulk_lhs(self, tau):
        if self.assembler is None:
            return (self.M_bulk + tau * (self.A_bulk + self.B_ale)
                    + tau * self.R_wind).tocsr()
        data = self.M_bulk.data + tau * (self.A_bulk.data + self.B_ale.data
                                         + self.R_wind.data)
        return self.assembler.bulk.matrix(data)

    def surface_lhs(self, coef):
        """``M_surf + coef * A_surf``."""
        if self.assembler is None:
            return (self.M_surf + coef * self.A_surf).tocsr()
        return self.assembler.surf.matrix(self.M_surf.data + coef * self.A_surf.data)


class Assembler:
    """Holds sparsity patterns for one mesh connectivity so repeated
    assembly on moved meshes costs only the element kernels."""

    def __init__(self, m, surf=None):
        from .mesh import extract_surface
        self.bulk = bulk_pattern(m)
        self.surf_view = surf if surf is not None else extract_surface(m)
        self.surf = surface_pattern(self.surf_view)
        self.trace_map = self.surf_view.bulk_index
        tr = self.trace_map
        # surface entries inside the bulk pattern (facets are faces of cells)
        self.surf_in_bulk = self.bulk.lookup(tr[self.surf.rows],
                                             tr[self.surf.indices])
        self.diag_trace_slots = self.bulk.diag_slots[tr]

    def surface_coords(self, m):
        return m.vertices[self.trace_map][self.surf_view.facets]

    def surface_to_bulk(self, S: CsrMatrix):
        """Embed a surface-pattern matrix as bulk-pattern data."""
        data = np.zeros(self.bulk.nnz)
        data[self.surf_in_bulk] = S.data
        return data


def assemble_bulk(m, motion, delta_omega, tau, assembler=None,
                  with_surface=True) -> AssembledOperators:
    """Bulk operators of one step on the mesh level ``m``.

    ``M_bulk = delta_omega int chi_i chi_j``, ``A_bulk = int grad chi_i .
    grad chi_j``, ``B_ale[j, i] = -delta_omega int chi_i J . grad chi_j`` and
    ``R_wind[j, i] = delta_omega int_Gamma J_h chi_i chi_j``; the two
    coefficient terms use the vertex quadrature rule.
    """
    asm = assembler or Assembler(m)
    pat = asm.bulk
    coords = m.vertices[m.cells]
    k1 = m.cells.shape[1]
    meas = _checked_measures(coords)
    ref = (np.ones((k1, k1)) + np.eye(k1)) * factorial(k1 - 1) / factorial(k1 + 1)
    M = pat.assemble(delta_omega * meas[:, None, None] * ref)
    D = barycentric_gradients(coords)
    A = pat.assemble(meas[:, None, None] * (D @ D.transpose(0, 2, 1)))

    jump = None if motion is None else motion.jump_nodal
    if jump is not None and np.any(jump):
        Jv = jump[m.cells]                                   # (n, k+1, amb)
        blocks = D @ Jv.transpose(0, 2, 1)                   # [a, b] = grad lambda_a . J_b
        B = pat.assemble(-delta_omega * (meas / k1)[:, None, None] * blocks)
    else:
        B = pat.matrix(np.zeros(pat.nnz))

    surf_coords = asm.surface_coords(m)
    s_meas = simplex_measures(surf_coords) if len(surf_coords) else np.zeros(0)
    wind = None if motion is None else motion.windshield_nodal
    R_data = np.zeros(pat.nnz)
    if wind is not None and wind.size and np.any(wind):
        kf = asm.surf_view.facets.shape[1]
        w = np.zeros(len(asm.trace_map))
        np.add.at(w, asm.surf_view.facets,
                  (s_meas / kf)[:, None] * wind[asm.surf_view.facets])
        R_data[asm.diag_trace_slots] = delta_omega * w
    R = pat.matrix(R_data)
    ops = AssembledOperators(M, A, B, R, asm.trace_map, assembler=asm)
    if with_surface:
        ops.M_surf, ops.A_surf = surface_operators(surf_coords, asm.surf)
    return ops


def surface_operators(surf_coords, pattern):
    if len(surf_coords) == 0:
        z = sp.csr_matrix((pattern.n, pattern.n))
        return z, z
    return (pattern.assemble(local_mass(surf_coords)),
            pattern.assemble(local_stiffness(surf_coords)))


def assemble_surface(surf, delta_diff, tau, pattern=None):
    """Return ``(M_surf, M_surf + tau * delta_diff * A_surf)`` on ``surf``."""
    pattern = pattern or surface_pattern(surf)
    M, A = surface_operators(surf.vertices[surf.facets], pattern)
    return M, (M + (tau * delta_diff) * A).tocsr()


def surface_load(surf, f, pattern=None, M_surf=None):
    """``int_Gamma I_h(f) chi_j``, i.e. ``M_surf @ f``."""
    if M_surf is None:
        M_surf, _ = assemble_surface(surf, 0.0, 0.0, pattern)
    return M_surf @ np.asarray(f, dtype=float)


def scatter_to_bulk(trace_map, surface_vector, n_bulk):
    out = np.zeros(n_bulk)
    out[trace_map] = surface_vector
    return out


def apply_outer_bc(space: P1Space, K, rhs, mode="neumann", u_D=0.0):
    """Impose the outer boundary condition on ``K x = rhs``.

    Neumann conditions are natural and leave the system untouched. Dirichlet
    values are eliminated symmetrically: constrained rows and columns become
    identity, and the right-hand side is corrected by ``K[:, D] u_D``.
    """
    if mode == "neumann":
        return K, rhs
    if mode != "dirichlet":
        raise ValueError(f"unknown outer boundary mode {mode!r}")
    mask = space.dirichlet_mask
    if mask is None or not np.any(mask):
        return K, rhs
    K = sp.csr_matrix(K, copy=True)
    K.sum_duplicates()
    values = np.where(mask, u_D, 0.0)
    rhs = np.asarray(rhs, dtype=float) - K @ values
    rhs[mask] = values[mask]
    rows = np.repeat(np.arange(K.shape[0]), np.diff(K.indptr))
    hit = mask[rows] | mask[K.indices]
    K.data[hit] = 0.0
    diag_hit = hit & (rows == K.indices)
    K.data[diag_hit] = 1.0
    missing = mask.copy()
    missing[rows[diag_hit]] = False
    if missing.any():
        K = (K + sp.diags(missing.astype(float))).tocsr()
    return K, rhs
