"""Level-set description of the moving inner surface.

The surface is the zero set of ``phi(x, t)``; ``phi < 0`` inside the cell
and ``phi > 0`` in the surrounding bulk. All functions accept either a
single point of shape ``(dim,)`` or a batch of shape ``(n, dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EPS_GRAD = 1e-10
TOL_PROJ = 1e-12
MAX_PROJ_ITERS = 50
H_FD = 1e-6

KINDS = ("paper_tanh", "sphere", "custom")
BULK_VELOCITY_MODES = ("zero", "harmonic_extension")


class DegenerateGradient(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class VelocityMode:
    """Material velocity of the bulk: at rest, or the harmonic extension of
    the surface velocity (the Lagrangian case)."""

    bulk_velocity: str = "zero"

    def __post_init__(self):
        if self.bulk_velocity not in BULK_VELOCITY_MODES:
            raise ValueError(f"unknown bulk velocity {self.bulk_velocity!r}")

    @property
    def lagrangian(self):
        return self.bulk_velocity == "harmonic_extension"


@dataclass(frozen=True)
class LevelSetGeometry:
    """Analytic level set.

    kind ``paper_tanh``
        ``(x1 + a tanh(b t)(c - x2^2))^2 + x2^2 [+ x3^2] - r^2`` with
        ``params = (a, b, c, r)``, default ``(1, 5, 0.7, 1)``.
    kind ``sphere``
        ``|x|^2 - r^2``, ``params = (r,)``.
    kind ``custom``
        Either a user callable ``func(x, t)`` (vectorised over rows of x), or
        the quadric ``c0 + sum_i c_i x_i^2 + t (d0 + sum_i d_i x_i^2)`` with
        ``params = (c0, c_1..c_dim, d0, d_1..d_dim)``. Derivatives are taken
        by central differences.
    """

    dim: int = 2
    kind: str = "paper_tanh"
    params: tuple = ()
    func: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        if not params:
            params = {"paper_tanh": (1.0, 5.0, 0.7, 1.0),
                      "sphere": (1.0,)}.get(self.kind, ())
        expected = {"paper_tanh": 4, "sphere": 1,
                    "custom": 2 * (self.dim + 1)}[self.kind]
        if self.kind != "custom" or self.func is None:
            if len(params) != expected:
                raise ValueError(f"{self.kind} expects {expected} coefficients, "
                                 f"got {len(params)}")
        object.__setattr__(self, "params", params)

    @property
    def stationary(self):
        if self.kind == "sphere":
            return True
        if self.kind == "paper_tanh":
            return self.params[0] == 0.0 or self.params[1] == 0.0
        if self.func is None:
            return not any(self.params[self.dim + 1:])
        return False

    # -- evaluation -----------------------------------------------------
    def _custom_phi(self, x, t):
        if self.func is not None:
            return np.asarray(self.func(x, t), dtype=float)
        d = self.dim
        c0, c = self.params[0], np.array(self.params[1:d + 1])
        d0, dd = self.params[d + 1], np.array(self.params[d + 2:])
        return c0 + (x ** 2) @ c + t * (d0 + (x ** 2) @ dd)

    def phi(self, x, t):
        x, single = _points(x, self.dim)
        _check_time(t)
        if self.kind == "paper_tanh":
            a, b, c, r = self.params
            s = np.tanh(b * t)
            arg = x[:, 0] + a * s * (c - x[:, 1] ** 2)
            val = arg ** 2 + np.sum(x[:, 1:] ** 2, axis=1) - r * r
        elif self.kind == "sphere":
            val = np.sum(x ** 2, axis=1) - self.params[0] ** 2
        else:
            val = self._custom_phi(x, t)
        return val[0] if single else val

    def grad(self, x, t):
        x, single = _points(x, self.dim)
        _check_time(t)
        if self.kind == "paper_tanh":
            a, b, c, r = self.params
            s = np.tanh(b * t)
            arg = x[:, 0] + a * s * (c - x[:, 1] ** 2)
            g = 2.0 * x.copy()
            g[:, 0] = 2.0 * arg
            g[:, 1] = 2.0 * x[:, 1] * (1.0 - 2.0 * a * s * arg)
        elif self.kind == "sphere":
            g = 2.0 * x
        else:
            g = np.empty_like(x)
            for i in range(self.dim):
                e = np.zeros(self.dim)
                e[i] = H_FD
                g[:, i] = (self._custom_phi(x + e, t)
                           - self._custom_phi(x - e, t)) / (2 * H_FD)
        return g[0] if single else g

    def phi_t(self, x, t):
        x, single = _points(x, self.dim)
        _check_time(t)
        if self.kind == "paper_tanh":
            a, b, c, r = self.params
            s = np.tanh(b * t)
            q = c - x[:, 1] ** 2
            arg = x[:, 0] + a * s * q
            val = 2.0 * arg * a * q * b * (1.0 - s * s)
        elif self.kind == "sphere":
            val = np.zeros(x.shape[0])
        elif t >= H_FD:
            val = (self._custom_phi(x, t + H_FD)
                   - self._custom_phi(x, t - H_FD)) / (2 * H_FD)
        else:
            # second-order one-sided difference; phi is not defined for t < 0
            val = (-3.0 * self._custom_phi(x, t) + 4.0 * self._custom_phi(x, t + H_FD)
                   - self._custom_phi(x, t + 2 * H_FD)) / (2 * H_FD)
        return val[0] if single else val


def _points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite point coordinates")
    return x, single


def _check_time(t):
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"time must be finite and >= 0, got {t}")


def eval_phi(g: LevelSetGeometry, x, t):
    return g.phi(x, t)


def grad_phi(g: LevelSetGeometry, x, t):
    return g.grad(x, t)


def is_degenerate(g: LevelSetGeometry, x, t):
    return np.linalg.norm(np.atleast_2d(g.grad(x, t)), axis=1) <= EPS_GRAD


def _grad_norm(g, x, t):
    gr = np.atleast_2d(g.grad(x, t))
    nrm = np.linalg.norm(gr, axis=1)
    if np.any(nrm <= EPS_GRAD):
        raise DegenerateGradient(f"|grad phi| <= {EPS_GRAD} at t={t}")
    return gr, nrm


def surface_normal(g: LevelSetGeometry, x, t):
    """Unit normal ``-grad phi / |grad phi|``, pointing from the bulk into
    the cell."""
    gr, nrm = _grad_norm(g, x, t)
    nu = -gr / nrm[:, None]
    return nu[0] if np.ndim(x) == 1 else nu


def normal_velocity(g: LevelSetGeometry, x, t):
    """``V = -phi_t / |grad phi|``.

    This is the speed of the zero set along ``grad phi`` (out of the cell);
    measured along :func:`surface_normal` the speed is ``-V``.
    """
    _, nrm = _grad_norm(g, x, t)
    v = -np.atleast_1d(g.phi_t(x, t)) / nrm
    return v[0] if np.ndim(x) == 1 else v


def surface_velocity(g: LevelSetGeometry, x, t):
    """Kinematic velocity vector of surface points, ``-phi_t grad phi / |grad phi|^2``;
    along it ``d/dt phi(x(t), t) = 0``."""
    gr, nrm = _grad_norm(g, x, t)
    v = -np.atleast_1d(g.phi_t(x, t))[:, None] * gr / (nrm ** 2)[:, None]
    return v[0] if np.ndim(x) == 1 else v


def project_to_surface(g: LevelSetGeometry, x, t, tol=TOL_PROJ,
                       max_iters=MAX_PROJ_ITERS):
    """Damped Newton iteration ``y <- y - phi grad phi / |grad phi|^2``."""
    single = np.ndim(x) == 1
    y = np.atleast_2d(np.array(x, dtype=float))
    val = np.atleast_1d(g.phi(y, t))
    for _ in range(max_iters + 1):
        active = np.abs(val) > tol
        if not active.any():
            return y[0] if single else y
        ya = y[active]
        gr = np.atleast_2d(g.grad(ya, t))
        n2 = np.sum(gr * gr, axis=1)
        if np.any(n2 <= EPS_GRAD ** 2):
            raise NoConvergence("projection hit a degenerate gradient")
        step = (val[active] / n2)[:, None] * gr
        lam = np.ones(ya.shape[0])
        old = np.abs(val[active])
        for _ in range(30):
            trial = ya - lam[:, None] * step
            tv = np.atleast_1d(g.phi(trial, t))
            bad = np.abs(tv) >= old
            if not bad.any():
                break
            lam[bad] *= 0.5
        y[active] = trial
        val[active] = tv
    raise NoConvergence(f"projection did not reach |phi| <= {tol} "
                        f"in {max_iters} iterations")


def sample_min_grad(g: LevelSetGeometry, times: Sequence[float],
                    n_samples=256, band=0.05):
    """Smallest ``|grad phi|`` over points near the zero set at the given
    times (a sampled check of the tubular-neighbourhood invariant)."""
    rng = np.random.default_rng(0)
    worst = np.inf
    for t in times:
        x = rng.normal(size=(n_samples, g.dim))
        x /= np.linalg.norm(x, axis=1)[:, None]
        try:
            y = project_to_surface(g, x, t)
        except NoConvergence:
            return 0.0
        nrm = np.linalg.norm(g.grad(y, t), axis=1)
        shifted = y + band * (-(g.grad(y, t)) / nrm[:, None])
        worst = min(worst, nrm.min(),
                    np.linalg.norm(g.grad(shifted, t), axis=1).min())
    return worst
