"""Run diagnostics, physical scaling and the named parameter regimes."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from . import fem
from .geometry import LevelSetGeometry, VelocityMode
from .stepper import ParameterSet, reaction_g

DIAG_COLUMNS = ("step", "time", "mass_u", "mass_w", "mass_z", "mass_wz",
                "combined_mass", "g_residual_cum", "comp_gap", "min_w",
                "max_u_trace", "fb_measure")
NEGATIVE_TOL = -1e-8


class UnknownPreset(KeyError):
    pass


@dataclass
class DiagnosticsRecord:
    step: int
    time: float
    mass_u: float
    mass_w: float
    mass_z: float
    mass_wz: float
    combined_mass: float
    g_residual_cum: float
    comp_gap: float
    min_w: float
    max_u_trace: float
    fb_measure: float

    def row(self):
        return [getattr(self, c) for c in DIAG_COLUMNS]


class Masses(NamedTuple):
    mass_u: float
    mass_w: float
    mass_z: float
    mass_wz: float
    combined_mass: float


def compute_masses(ops: fem.AssembledOperators, U, W, Z) -> Masses:
    """``1' M f`` for each field; ``M_bulk`` already carries delta_omega, so
    ``mass_u`` is delta_omega-weighted and ``combined = mass_u + mass_z``."""
    ones_s = np.ones(ops.M_surf.shape[0])
    mu = float(np.sum(ops.M_bulk @ U))
    mw = float(ones_s @ (ops.M_surf @ W))
    mz = float(ones_s @ (ops.M_surf @ Z))
    return Masses(mu, mw, mz, mw + mz, mu + mz)


def g_residual(M_surf, U_trace, W, p: ParameterSet, tau, accumulator=0.0):
    """Add ``tau * int_Gamma I_h g(U, W)`` on the old level to the running
    total of the time-integrated binding rate."""
    g = reaction_g(p, U_trace, W)
    return accumulator + tau * float(np.sum(M_surf @ g))


def complementarity_gap(M_surf, U_trace, W):
    """``int_Gamma I_h min(U+, W+)``; zero iff the supports are nodally disjoint."""
    m = np.minimum(np.maximum(U_trace, 0.0), np.maximum(W, 0.0))
    return float(np.sum(M_surf @ m))


class FreeBoundary(NamedTuple):
    crossings: np.ndarray   # (n_pieces, dim - 1 + 1, amb): points (2D) or segments (3D)
    measure: float          # length/area of {I_h W < threshold}


def _clip_below(pts, vals, thr):
    """Polygon of a simplex (as a vertex loop) where the linear field < thr."""
    out = []
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        fa, fb = vals[i] - thr, vals[(i + 1) % n] - thr
        if fa < 0:
            out.append(a)
        if (fa < 0) != (fb < 0):
            s = fa / (fa - fb)
            out.append(a + s * (b - a))
    return out


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    p0 = poly[0]
    acc = np.zeros(3)
    for a, b in zip(poly[1:-1], poly[2:]):
        acc += np.cross(np.append(a - p0, [0] * (3 - len(p0))),
                        np.append(b - p0, [0] * (3 - len(p0))))
    return 0.5 * float(np.linalg.norm(acc))


def extract_free_boundary(surf_vertices, facets, W, threshold=0.1) -> FreeBoundary:
    """Threshold crossings of the P1 interpolant of ``W`` and the exact
    measure of the sub-threshold region.

    Facets are segments (2D problems) or triangles (3D problems). Crossings
    are returned per facet edge: points for segments and line segments for
    triangles.
    """
    W = np.asarray(W, dtype=float)
    pts = np.asarray(surf_vertices, dtype=float)
    facets = np.asarray(facets)
    if facets.size == 0:
        return FreeBoundary(np.zeros((0, 1, pts.shape[1] if pts.ndim == 2 else 0)), 0.0)
    k = facets.shape[1]
    pieces = []
    measure = 0.0
    if k == 2:
        a, b = pts[facets[:, 0]], pts[facets[:, 1]]
        fa, fb = W[facets[:, 0]] - threshold, W[facets[:, 1]] - threshold
        length = np.linalg.norm(b - a, axis=1)
        both = (fa < 0) & (fb < 0)
        cross = (fa < 0) != (fb < 0)
        s = np.where(cross, fa / np.where(cross, fa - fb, 1.0), 0.0)
        below_frac = np.where(both, 1.0, 0.0)
        below_frac = np.where(cross & (fa < 0), s, below_frac)
        below_frac = np.where(cross & (fb < 0), 1.0 - s, below_frac)
        measure = float(np.sum(below_frac * length))
        pieces = (a[cross] + s[cross, None] * (b[cross] - a[cross]))[:, None, :]
        return FreeBoundary(pieces, measure)
    for f in facets:
        P, V = pts[f], W[f]
        if np.all(V >= threshold):
            continue
        poly = _clip_below(list(P), V, threshold)
        measure += _polygon_area(poly)
        seg = []
        for i in range(k):
            j = (i + 1) % k
            fa, fb = V[i] - threshold, V[j] - threshold
            if (fa < 0) != (fb < 0):
                s = fa / (fa - fb)
                seg.append(P[i] + s * (P[j] - P[i]))
        if len(seg) == 2:
            pieces.append(seg)
    arr = np.array(pieces) if pieces else np.zeros((0, 2, pts.shape[1]))
    return FreeBoundary(arr, float(measure))


class DiagnosticsTracker:
    """Builds one :class:`DiagnosticsRecord` per recorded level."""

    def __init__(self, p: ParameterSet, threshold=0.1):
        self.p = p
        self.threshold = threshold
        self.g_cum = 0.0
        self.records: List[DiagnosticsRecord] = []
        self.negative_warned = False

    def record(self, stepper, state, previous):
        ops = stepper.ops
        if previous is not None:
            prev_state, prev_ops, tau = previous
            self.g_cum = g_residual(prev_ops.M_surf, prev_state.U[prev_ops.trace_map],
                                    prev_state.W, self.p, tau, self.g_cum)
        masses = compute_masses(ops, state.U, state.W, state.Z)
        U_tr = state.U[ops.trace_map]
        surf_pts = stepper.mesh.vertices[ops.trace_map]
        fb = extract_free_boundary(surf_pts, stepper.surface.facets, state.W,
                                   self.threshold)
        lowest = min(state.U.min(initial=0.0), state.W.min(initial=0.0),
                     state.Z.min(initial=0.0))
        if lowest < NEGATIVE_TOL and not self.negative_warned:
            self.negative_warned = True
            warnings.warn(f"negative concentration {lowest:.3e} at step {state.level}",
                          RuntimeWarning, stacklevel=2)
        rec = DiagnosticsRecord(
            step=state.level, time=state.time, **masses._asdict(),
            g_residual_cum=self.g_cum,
            comp_gap=complementarity_gap(ops.M_surf, U_tr, state.W),
            min_w=float(state.W.min()) if state.W.size else 0.0,
            max_u_trace=float(U_tr.max()) if U_tr.size else 0.0,
            fb_measure=fb.measure)
        self.records.append(rec)
        return rec


# -- nondimensionalisation ------------------------------------------------------

@dataclass(frozen=True)
class PhysicalParameters:
    """Dimensional scales (SI units)."""

    L: float = 7.5e-6          # m
    U: float = 1.0e-3          # mol m^-3
    W: float = 2.3e-8          # mol m^-2
    Z: float = 2.3e-8          # mol m^-2
    D_omega: float = 1.0e-11   # m^2 s^-1
    D_gamma: float = 1.0e-15
    D_gamma_p: float = 1.0e-15
    k_on: float = 1.0e3        # m^3 mol^-1 s^-1
    k_off: float = 5.0e-3      # s^-1
    S: float = 5.6             # s

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{f.name} must be positive, got {v}")


class Dimensionless(NamedTuple):
    delta_omega: float
    delta_gamma: float
    delta_gamma_p: float
    delta_k: float
    delta_kp_inv: float
    mu: float
    mu_p: float


def nondimensionalize(phys: PhysicalParameters) -> Dimensionless:
    L, S, D = phys.L, phys.S, phys.D_omega
    return Dimensionless(
        delta_omega=L * L / (D * S),
        delta_gamma=phys.D_gamma * S / (L * L),
        delta_gamma_p=phys.D_gamma_p * S / (L * L),
        delta_k=D / (phys.k_on * L * phys.W),
        delta_kp_inv=phys.k_off * phys.Z * L / (D * phys.U),
        mu=S * phys.U * D / (L * phys.W),
        mu_p=S * phys.U * D / (L * phys.Z),
    )


# -- regime presets -------------------------------------------------------------

def windshield_w0(x):
    """Receptor profile ``exp(-6 (1 - x1^2))``."""
    x = np.atleast_2d(x)
    return np.exp(-6.0 * (1.0 - x[:, 0] ** 2))


@dataclass
class Preset:
    name: str
    params: ParameterSet
    geometry: LevelSetGeometry
    u0: object
    w0: object
    z0: object
    initial_description: str
    sweep_parameter: Optional[str] = None
    sweep_values: tuple = ()
    threshold: float = 0.1

    def sweep(self):
        """ParameterSets along the preset's limit path."""
        return [sweep_params(self.params, self.sweep_parameter, v)
                for v in self.sweep_values]


def sweep_params(p: ParameterSet, parameter: str, value: float) -> ParameterSet:
    """Set one sweep parameter; ``eps_*`` names move several constants at once."""
    if parameter == "delta_k":
        return p.with_(delta_k=value)
    if parameter == "eps_fast_nodiff":
        return p.with_(delta_k=value, delta_gamma=value, delta_gamma_p=value)
    if parameter == "eps_full":
        return p.with_(delta_omega=value, delta_k=value, delta_kp=1.0 / value,
                       delta_gamma=value, delta_gamma_p=value)
    if parameter in {f.name for f in fields(ParameterSet)}:
        return p.with_(**{parameter: value})
    raise ValueError(f"cannot sweep {parameter!r}")


PRESET_NAMES = ("fast_binding", "fast_binding_no_surface_diffusion",
                "full_limit_neumann", "full_limit_dirichlet",
                "windshield_on", "windshield_off")

_SWEEP = (1e-1, 1e-2, 1e-3)


def regime_preset(name: str) -> Preset:
    geom = LevelSetGeometry(dim=2, kind="paper_tanh")
    rest = VelocityMode("zero")
    if name == "fast_binding":
        p = ParameterSet(delta_omega=1.0, delta_gamma=1.0, delta_gamma_p=1.0,
                         delta_k=1e-2, delta_kp=1.0, outer_bc="neumann",
                         tau=1e-3, T=1.0, velocity_mode=rest)
        return Preset(name, p, geom, 1.0, 1.0, 0.0, "u0 = 1, w0 = 1, z0 = 0",
                      "delta_k", _SWEEP)
    if name == "fast_binding_no_surface_diffusion":
        p = ParameterSet(delta_omega=1.0, delta_gamma=1e-2, delta_gamma_p=1e-2,
                         delta_k=1e-2, delta_kp=1.0, outer_bc="neumann",
                         tau=1e-3, T=1.0, velocity_mode=rest)
        return Preset(name, p, geom, 1.0, 1.0, 0.0, "u0 = 1, w0 = 1, z0 = 0",
                      "eps_fast_nodiff", _SWEEP)
    if name in ("full_limit_neumann", "full_limit_dirichlet"):
        bc = name.rsplit("_", 1)[1]
        p = ParameterSet(delta_omega=0.01, delta_gamma=0.01, delta_gamma_p=0.01,
                         delta_k=0.01, delta_kp=100.0, g_kind="quadratic",
                         outer_bc=bc, u_D=1.0, tau=1e-3, T=1.0,
                         velocity_mode=rest)
        return Preset(name, p, geom, 1.0, 1.0, 0.0,
                      "u0 = u_D = 1, w0 = 1, z0 = 0", "eps_full", _SWEEP)
    if name in ("windshield_on", "windshield_off"):
        mode = VelocityMode("zero" if name == "windshield_on" else "harmonic_extension")
        p = ParameterSet(delta_omega=1.0, delta_gamma=1e-3, delta_gamma_p=1e-3,
                         delta_k=1e-3, delta_kp=1.0, g_kind="hill", hill_n=2.0,
                         outer_bc="dirichlet", u_D=1.0, tau=1e-5, T=0.4,
                         velocity_mode=mode)
        return Preset(name, p, geom, 1.0, windshield_w0, 0.0,
                      "u0 = u_D = 1, w0 = exp(-6 (1 - x1^2)), z0 = 0")
    raise UnknownPreset(name)
