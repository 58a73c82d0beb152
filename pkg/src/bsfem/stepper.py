"""IMEX time stepping of the coupled ligand / receptor / complex system.

Per step the mesh is advanced first, then three linear solves are made:
the bulk ligand ``U`` on the new mesh with diffusion, ALE advection and the
windshield term implicit, then the receptors ``W`` and complexes ``Z`` on
the new surface. Reaction loads are integrated on the previous surface.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem
from .geometry import LevelSetGeometry, VelocityMode
from .mesh import (MeshMotion, SimplicialMesh, _ExtensionCache, advance_mesh,
                   extract_surface)
from .sparse import SolverError, solve_general, solve_spd

log = logging.getLogger(__name__)

G_KINDS = ("quadratic", "hill")
OUTER_BCS = ("neumann", "dirichlet")
REACTIONS = ("explicit", "linearized")


class SolveFailure(RuntimeError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class ParameterSet:
    """Dimensionless constants and discretisation settings.

    ``reaction`` selects how the surface reaction enters the step:
    ``explicit`` evaluates it at the old level for all three equations;
    ``linearized`` writes ``g(u, w) = u b(u, w)`` and takes ``u`` at the new
    level (an implicit Robin term in the bulk solve), reusing the same load
    in the ``W`` and ``Z`` equations so both conservation laws stay exact.
    """

    delta_omega: float = 1.0
    delta_gamma: float = 1.0
    delta_gamma_p: float = 1.0
    delta_k: float = 1.0
    delta_kp: float = 1.0
    g_kind: str = "quadratic"
    hill_n: float = 2.0
    outer_bc: str = "neumann"
    u_D: float = 1.0
    tau: float = 1e-3
    T: float = 1.0
    velocity_mode: VelocityMode = VelocityMode("zero")
    windshield_sign: str = "analysis"
    reaction: str = "explicit"
    solver_tol: float = 1e-10
    ext_tol: float = 1e-10
    reaction_enabled: bool = True

    def __post_init__(self):
        for name in ("delta_omega", "delta_gamma", "delta_gamma_p",
                     "delta_k", "delta_kp"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.g_kind not in G_KINDS:
            raise ValueError(f"unknown g kind {self.g_kind!r}")
        if self.g_kind == "hill" and not self.hill_n > 1:
            raise ValueError("hill exponent must exceed 1")
        if self.outer_bc not in OUTER_BCS:
            raise ValueError(f"unknown outer bc {self.outer_bc!r}")
        if not (self.tau > 0 and self.T > 0 and self.tau <= self.T):
            raise ValueError("need 0 < tau <= T")
        if self.reaction not in REACTIONS:
            raise ValueError(f"unknown reaction treatment {self.reaction!r}")
        if isinstance(self.velocity_mode, str):
            object.__setattr__(self, "velocity_mode", VelocityMode(self.velocity_mode))

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class FieldState:
    U: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    time: float = 0.0
    level: int = 0


def reaction_g(p: ParameterSet, u, w):
    """Binding rate: ``u w`` or ``u^n w / (1 + u^n)``."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if not p.reaction_enabled:
        return np.zeros(np.broadcast(u, w).shape)
    if p.g_kind == "quadratic":
        return u * w
    un = np.abs(u) ** p.hill_n * np.sign(u) if p.hill_n % 1 else u ** p.hill_n
    return un * w / (1.0 + un)


def reaction_rate_factor(p: ParameterSet, u, w):
    """``b`` with ``g(u, w) = u b(u, w)``."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if not p.reaction_enabled:
        return np.zeros(np.broadcast(u, w).shape)
    if p.g_kind == "quadratic":
        return w + 0.0 * u
    n = p.hill_n
    um = np.abs(u) ** (n - 1)
    return um * w / (1.0 + np.abs(u) ** n)


def max_reaction_slope(p: ParameterSet, u, w):
    """Upper estimate of ``max |dg/du|, |dg/dw|`` over nodal values."""
    u = np.abs(np.asarray(u, float))
    w = np.abs(np.asarray(w, float))
    if not p.reaction_enabled or u.size == 0:
        return 0.0
    if p.g_kind == "quadratic":
        return float(max(u.max(), w.max()))
    n = p.hill_n
    du = n * u ** (n - 1) * w / (1 + u ** n) ** 2
    dw = u ** n / (1 + u ** n)
    return float(max(du.max(), dw.max()))


def reaction_rate_bound(p: ParameterSet, u_trace, w, h, tau):
    """Largest explicit reaction rate seen by one step.

    The surface rates are ``max|dg| / delta_k`` and ``1 / delta_kp``. With
    the explicit treatment the bulk boundary load also acts on ``U`` through
    a layer of width ``l = max(sqrt(tau / delta_omega), h / 3)``, which gives
    the rate ``max|dg| / (delta_k delta_omega l)``; the linearized variant
    takes that load implicitly.
    """
    slope = max_reaction_slope(p, u_trace, w)
    rate = max(slope / p.delta_k, 1.0 / p.delta_kp)
    if p.reaction == "explicit" and h > 0:
        layer = max(math.sqrt(tau / p.delta_omega), h / 3.0)
        rate = max(rate, slope / (p.delta_k * p.delta_omega * layer))
    return rate


class Stepper:
    """Owns the per-connectivity caches and the current mesh level."""

    def __init__(self, p: ParameterSet, geometry: LevelSetGeometry,
                 mesh: SimplicialMesh):
        self.p = p
        self.g = geometry
        self.mesh = mesh
        self.surface = extract_surface(mesh)
        self.asm = fem.Assembler(mesh, self.surface)
        self.ext_cache = _ExtensionCache(mesh)
        self.bulk_space = fem.P1Space.bulk(mesh, p.outer_bc == "dirichlet")
        self.motion = MeshMotion.at_rest(mesh)
        self.ops = fem.assemble_bulk(mesh, None, p.delta_omega, p.tau, self.asm)
        facets = mesh.vertices[self.surface.bulk_index][self.surface.facets]
        self.surface_h = (float(np.mean(fem.simplex_measures(facets)
                                        ** (1.0 / max(mesh.dim - 1, 1))))
                          if len(facets) else 0.0)
        self.stats = {"bulk_iters": 0, "surface_iters": 0, "warned_stability": False}

    def trace(self, U):
        return U[self.asm.trace_map]

    def initial_state(self, u0, w0, z0):
        """Nodal interpolation of the initial data (callables or constants)."""
        xb = self.mesh.vertices
        xs = xb[self.asm.trace_map]
        U = _interp(u0, xb)
        if self.p.outer_bc == "dirichlet":
            U[self.bulk_space.dirichlet_mask] = self.p.u_D
        return FieldState(U, _interp(w0, xs), _interp(z0, xs), 0.0, 0)

    def _stability_guard(self, state):
        p = self.p
        rate = reaction_rate_bound(p, self.trace(state.U), state.W, self.surface_h,
                                   p.tau)
        if p.tau * rate > 1.0 and not self.stats["warned_stability"]:
            self.stats["warned_stability"] = True
            warnings.warn(f"explicit reaction step tau*rate = {p.tau * rate:.3g} > 1",
                          RuntimeWarning, stacklevel=3)

    def step(self, state: FieldState, tau: Optional[float] = None) -> FieldState:
        tau = self.p.tau if tau is None else tau
        m_new, motion = advance_mesh(
            self.mesh, self.motion, self.g, state.time, tau,
            self.p.velocity_mode, windshield_sign=self.p.windshield_sign,
            ext_tol=self.p.ext_tol, cache=self.ext_cache,
            stiffness=self.ops.A_bulk)
        ops_new = fem.assemble_bulk(m_new, motion, self.p.delta_omega, tau, self.asm)
        new_state = imex_step(self.p, self.ops, ops_new, state, tau,
                              self.bulk_space, self.stats)
        self.mesh, self.motion, self.ops = m_new, motion, ops_new
        return new_state


def _interp(f, x):
    if callable(f):
        return np.asarray(f(x), dtype=float).reshape(len(x)).copy()
    return np.full(len(x), float(f))


def imex_step(p: ParameterSet, ops_old: fem.AssembledOperators,
              ops_new: fem.AssembledOperators, state: FieldState, tau: float,
              bulk_space: fem.P1Space, stats=None) -> FieldState:
    """One step of the scheme from operators on the old and new mesh level."""
    tr = ops_old.trace_map
    n = len(state.U)
    U_tr = state.U[tr]
    Ms_old, Ms_new = ops_old.M_surf, ops_new.M_surf
    stats = {} if stats is None else stats
    solve_kw = dict(tol=p.solver_tol)

    K = ops_new.bulk_lhs(tau)
    rhs = ops_old.M_bulk @ state.U
    release = state.Z / p.delta_kp
    if p.reaction == "explicit":
        g_old = reaction_g(p, U_tr, state.W)
        flux = release - g_old / p.delta_k
        rhs += tau * fem.scatter_to_bulk(tr, Ms_old @ flux, n)
    else:
        b = reaction_rate_factor(p, U_tr, state.W)
        rhs += tau * fem.scatter_to_bulk(tr, Ms_old @ release, n)
        K = _add_trace_robin(K, ops_old, ops_new, (tau / p.delta_k) * b)
    K, rhs = fem.apply_outer_bc(bulk_space, K, rhs, p.outer_bc, p.u_D)
    info = {}
    try:
        U = solve_general(K, rhs, x0=state.U, info=info, **solve_kw)
    except SolverError as exc:
        raise SolveFailure(f"bulk solve: {exc}") from exc
    stats["bulk_iters"] = stats.get("bulk_iters", 0) + info.get("iterations", 0)

    if p.reaction == "explicit":
        g_load = reaction_g(p, U_tr, state.W)
    else:
        g_load = b * U[tr]
    react = g_load / p.delta_k - release
    rhs_w = Ms_old @ (state.W - tau * react)
    rhs_z = Ms_old @ (state.Z + tau * react)
    try:
        W = _solve_surface(ops_new.surface_lhs(tau * p.delta_gamma), rhs_w,
                           state.W, info, solve_kw)
        stats["surface_iters"] = stats.get("surface_iters", 0) + info.get("iterations", 0)
        Z = _solve_surface(ops_new.surface_lhs(tau * p.delta_gamma_p), rhs_z,
                           state.Z, info, solve_kw)
    except SolverError as exc:
        raise SolveFailure(f"surface solve: {exc}") from exc
    return FieldState(U, W, Z, state.time + tau, state.level + 1)


def _solve_surface(K, rhs, x0, info, solve_kw):
    """PCG solve followed by a constant-mode correction.

    ``K = M + c A`` maps constants to ``M 1``, so shifting the iterate by
    ``1'r / 1'M1`` removes the mean of the Krylov residual. The surface mass
    ``1'K x`` then equals ``1'rhs`` to rounding, independent of ``tol``.
    """
    x = solve_spd(K, rhs, x0=x0, info=info, **solve_kw)
    denom = K.sum()
    if denom > 0:
        x += (rhs - K @ x).sum() / denom
    return x


def _add_trace_robin(K, ops_old, ops_new, coef):
    """``K + S' M_surf^{old} diag(coef) S`` with ``S`` the trace operator."""
    asm = ops_new.assembler
    Ms = ops_old.M_surf
    if asm is not None and K.nnz == asm.bulk.nnz and Ms.nnz == asm.surf.nnz:
        data = K.data.copy()
        data[asm.surf_in_bulk] += Ms.data * coef[asm.surf.indices]
        return asm.bulk.matrix(data)
    tr = ops_old.trace_map
    S = sp.csr_matrix((np.ones(len(tr)), (tr, np.arange(len(tr)))),
                      shape=(K.shape[0], len(tr)))
    return (K + S @ (Ms @ sp.diags(coef)) @ S.T).tocsr()


def time_grid(tau, T):
    """Step sizes covering ``[0, T]``; the last one is truncated if ``T/tau``
    is not an integer (within 1e-9 relative)."""
    n = T / tau
    full = int(math.floor(n + 1e-9))
    steps = [tau] * full
    rest = T - full * tau
    if rest > 1e-9 * tau:
        steps.append(rest)
    return steps


def run_simulation(p: ParameterSet, geometry: LevelSetGeometry,
                   mesh: SimplicialMesh, u0, w0, z0, *,
                   on_step: Optional[Callable] = None,
                   diagnostics=None):
    """Run to ``p.T``; returns ``(final_state, records, stepper)``.

    ``on_step(stepper, state)`` is called at level 0 and after every step;
    ``diagnostics`` (a :class:`bsfem.diagnostics.DiagnosticsTracker`) is
    created by default and records one row per step.
    """
    from .diagnostics import DiagnosticsTracker

    stepper = Stepper(p, geometry, mesh)
    state = stepper.initial_state(u0, w0, z0)
    tracker = diagnostics if diagnostics is not None else DiagnosticsTracker(p)
    tracker.record(stepper, state, None)
    if on_step:
        on_step(stepper, state)
    steps = time_grid(p.tau, p.T)
    if len(steps) and abs(steps[-1] - p.tau) > 1e-12 * p.tau:
        log.info("last step truncated to %.3g", steps[-1])
    for k, tau in enumerate(steps, start=1):
        if p.reaction == "explicit":
            stepper._stability_guard(state)
        prev = state
        prev_ops = stepper.ops
        try:
            state = stepper.step(state, tau)
        except Exception as exc:   # noqa: BLE001 - reported with step index
            raise SimulationError(k, exc) from exc
        if not (np.all(np.isfinite(state.U)) and np.all(np.isfinite(state.W))
                and np.all(np.isfinite(state.Z))):
            raise SimulationError(k, FloatingPointError("non-finite field values"))
        tracker.record(stepper, state, (prev, prev_ops, tau))
        if on_step:
            on_step(stepper, state)
    return state, tracker.records, stepper
