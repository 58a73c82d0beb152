"""Sparse storage and Jacobi-preconditioned Krylov solvers.

Storage is delegated to ``scipy.sparse.csr_matrix`` in canonical form
(sorted, duplicate-free columns). The Krylov iterations are written out
here so that every returned vector carries a checked residual bound.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

try:   # the compiled kernel behind csr_matrix @ vector, minus its dispatch cost
    from scipy.sparse._sparsetools import csr_matvec as _csr_matvec
except ImportError:   # pragma: no cover
    _csr_matvec = None

CsrMatrix = sp.csr_matrix


class SolverError(RuntimeError):
    pass


class NoConvergence(SolverError):
    def __init__(self, iterations, residual):
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(relative residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class NonFiniteBreakdown(SolverError):
    pass


class DimensionMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


@dataclass
class TripletBuffer:
    """Accumulates (row, col, value) entries; duplicates are summed later."""

    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    vals: list = field(default_factory=list)

    def add(self, i, j, v):
        self.rows.append(i)
        self.cols.append(j)
        self.vals.append(v)

    def add_block(self, idx, block):
        """Scatter a dense local block ``block[a, b]`` to ``(idx[a], idx[b])``."""
        idx = np.asarray(idx)
        block = np.asarray(block, dtype=float)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        self.rows.extend(r.ravel().tolist())
        self.cols.extend(c.ravel().tolist())
        self.vals.extend(block.ravel().tolist())

    def __len__(self):
        return len(self.vals)


def to_csr(t: TripletBuffer, n_rows: int, n_cols: int) -> CsrMatrix:
    rows = np.asarray(t.rows, dtype=np.int64)
    cols = np.asarray(t.cols, dtype=np.int64)
    vals = np.asarray(t.vals, dtype=float)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                      or cols.min() < 0 or cols.max() >= n_cols):
        raise IndexOutOfRange(f"triplet index outside {n_rows}x{n_cols}")
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A: CsrMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"matrix {A.shape} times vector {x.shape}")
    return A @ x


class CsrPattern:
    """Fixed sparsity pattern for repeated assembly on one connectivity.

    ``conn`` is an ``(n_elem, k)`` array of global indices; local blocks of
    shape ``(n_elem, k, k)`` are summed into the CSR value array with a
    single ``bincount``. Matrices built by :meth:`matrix` share the index
    arrays, so linear combinations can be formed on ``.data`` directly.
    """

    def __init__(self, conn, n):
        conn = np.asarray(conn, dtype=np.int64)
        k = conn.shape[1]
        rows = np.repeat(conn, k, axis=1).ravel()
        cols = np.tile(conn, (1, k)).ravel()
        keys = rows * n + cols
        self._keys, self.slot = np.unique(keys, return_inverse=True)
        self.n = n
        self.nnz = self._keys.size
        self.rows = self._keys // n
        self.indices = (self._keys % n).astype(np.int32)
        counts = np.bincount(self.rows, minlength=n)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.diag_slots = self.lookup(np.arange(n), np.arange(n), missing_ok=True)

    def lookup(self, rows, cols, missing_ok=False):
        """Positions of entries ``(rows, cols)`` in the data array (-1 if absent)."""
        keys = np.asarray(rows, dtype=np.int64) * self.n + np.asarray(cols, dtype=np.int64)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(self.nnz - 1, 0))
        found = self._keys[pos] == keys if self.nnz else np.zeros(keys.shape, bool)
        if not missing_ok and not found.all():
            raise IndexOutOfRange("entry outside the sparsity pattern")
        return np.where(found, pos, -1)

    def matrix(self, data) -> CsrMatrix:
        A = sp.csr_matrix((self.n, self.n))
        A.data = np.asarray(data, dtype=float)
        A.indices = self.indices
        A.indptr = self.indptr
        return A

    def assemble(self, blocks) -> CsrMatrix:
        data = np.bincount(self.slot, weights=np.asarray(blocks).ravel(),
                           minlength=self.nnz)
        return self.matrix(data)


_MAX_REFRESH = 5


def _check_system(A, b):
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"matrix is not square: {A.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise DimensionMismatch(f"rhs shape {b.shape} for matrix {A.shape}")
    if not np.all(np.isfinite(b)):
        raise NonFiniteBreakdown("non-finite right-hand side")
    if not sp.isspmatrix_csr(A):
        A = sp.csr_matrix(A)
    return A, b


def _jacobi(A):
    d = A.diagonal()
    if np.any(d == 0.0) or not np.all(np.isfinite(d)):
        raise NonFiniteBreakdown("zero or non-finite diagonal entry")
    return 1.0 / d


def _operator(A):
    """``x -> A @ x`` for the Krylov loops (many products on one matrix)."""
    if (_csr_matvec is None or A.dtype != np.float64
            or A.indices.dtype != A.indptr.dtype):
        return A.dot
    n_rows, n_cols = A.shape
    indptr, indices, data = A.indptr, A.indices, A.data

    def matvec(x):
        y = np.zeros(n_rows)
        _csr_matvec(n_rows, n_cols, indptr, indices, data,
                    np.ascontiguousarray(x, dtype=np.float64), y)
        return y
    return matvec


def _finish(A, b, x, bnorm, tol, it):
    r = np.linalg.norm(b - A @ x)
    if not np.isfinite(r):
        raise NonFiniteBreakdown("non-finite residual")
    if r > tol * bnorm:
        raise NoConvergence(it, r / bnorm)
    return x


def solve_spd(A, b, tol=1e-10, max_iters=None, x0=None, info=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``x`` with ``||b - A x|| <= tol ||b||``, re-checked with an
    explicit product before returning. ``info`` (a dict) receives the
    iteration count when given.
    """
    A, b = _check_system(A, b)
    n = b.size
    max_iters = 10 * n if max_iters is None else max_iters
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    dinv = _jacobi(A)
    mv = _operator(A)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - mv(x)
    target = tol * bnorm
    it = 0
    for _ in range(_MAX_REFRESH):
        z = dinv * r
        p = z.copy()
        rz = r @ z
        while np.sqrt(r @ r) > target and it < max_iters:
            Ap = mv(p)
            pAp = p @ Ap
            if not np.isfinite(pAp) or pAp <= 0.0:
                raise NonFiniteBreakdown("curvature p'Ap <= 0; matrix not SPD")
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            z = dinv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
            it += 1
            if it % 50 == 0:
                # guard against drift of the recursive residual
                r = b - mv(x)
        # the recursive residual can undershoot; restart from the true one
        r = b - mv(x)
        if np.sqrt(r @ r) <= target or it >= max_iters:
            break
    if info is not None:
        info["iterations"] = it
    return _finish(A, b, x, bnorm, tol, it)


def _bicgstab(mv, dinv, b, x, target, max_iters):
    """BiCGStab iterations; returns ``(x, iterations)`` when converged, out
    of budget, stalled or broken down (the caller checks the residual)."""
    n = b.size
    r = b - mv(x)
    it = 0
    restarts = 0
    while True:
        r0 = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        broken = False
        while np.sqrt(r @ r) > target and it < max_iters:
            rho_new = r0 @ r
            if rho_new == 0.0:
                broken = True   # lost biorthogonality
                break
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * v)
            ph = dinv * p
            v = mv(ph)
            denom = r0 @ v
            if denom == 0.0:
                broken = True
                break
            alpha = rho_new / denom
            s = r - alpha * v
            it += 1
            if np.sqrt(s @ s) <= target:
                x += alpha * ph
                r = s
                break
            sh = dinv * s
            t = mv(sh)
            tt = t @ t
            if tt == 0.0:
                broken = True
                break
            omega = (t @ s) / tt
            x += alpha * ph + omega * sh
            r = s - omega * t
            rho = rho_new
            if omega == 0.0:
                broken = True
                break
        if not np.all(np.isfinite(x)):
            raise NonFiniteBreakdown("non-finite BiCGStab iterate")
        # restart from the true residual if the recursion drifted or broke down
        r = b - mv(x)
        if np.sqrt(r @ r) <= target or it >= max_iters or restarts >= _MAX_REFRESH:
            return x, it
        if broken and restarts >= 1 and np.sqrt(r0 @ r0) <= np.sqrt(r @ r):
            return x, it   # breakdown without progress
        restarts += 1


def _gmres(mv, dinv, b, x, target, max_iters, restart):
    """Right-preconditioned restarted GMRES with Givens rotations and
    re-orthogonalised classical Gram-Schmidt."""
    n = b.size
    m = max(1, min(restart, n))
    it = 0
    best = np.inf
    while it < max_iters:
        r = b - mv(x)
        beta = np.sqrt(r @ r)
        if not np.isfinite(beta):
            raise NonFiniteBreakdown("non-finite GMRES residual")
        if beta <= target or beta >= best * (1.0 - 1e-12):
            break   # converged, or a whole cycle made no progress
        best = beta
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for j in range(m):
            w = mv(dinv * V[j])
            h = V[:j + 1] @ w
            w -= h @ V[:j + 1]
            h2 = V[:j + 1] @ w
            w -= h2 @ V[:j + 1]
            H[:j + 1, j] = h + h2
            hn = np.sqrt(w @ w)
            H[j + 1, j] = hn
            for i in range(j):
                a, c = H[i, j], H[i + 1, j]
                H[i, j] = cs[i] * a + sn[i] * c
                H[i + 1, j] = -sn[i] * a + cs[i] * c
            den = np.hypot(H[j, j], H[j + 1, j])
            if den == 0.0:
                break
            cs[j], sn[j] = H[j, j] / den, H[j + 1, j] / den
            H[j, j], H[j + 1, j] = den, 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            it += 1
            k = j + 1
            if hn == 0.0 or abs(g[j + 1]) <= 0.5 * target or it >= max_iters:
                break
            V[j + 1] = w / hn
        if k == 0:
            break
        y = np.linalg.lstsq(H[:k, :k], g[:k], rcond=None)[0]
        x = x + dinv * (y @ V[:k])
    return x, it


def solve_general(A, b, tol=1e-10, max_iters=None, x0=None, info=None):
    """Jacobi-preconditioned BiCGStab for nonsymmetric systems.

    If BiCGStab breaks down or has not converged within its share of the
    budget, the remaining iterations go to restarted GMRES, which cannot
    break down and stalls only on (near-)singular systems.
    """
    A, b = _check_system(A, b)
    n = b.size
    max_iters = 10 * n if max_iters is None else max_iters
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    dinv = _jacobi(A)
    mv = _operator(A)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    target = tol * bnorm
    share = min(max_iters, 100 + 4 * int(np.sqrt(n)))
    x, it = _bicgstab(mv, dinv, b, x, target, share)
    r = b - mv(x)
    if np.sqrt(r @ r) > target and it < max_iters:
        x, extra = _gmres(mv, dinv, b, x, target, max_iters - it, restart=200)
        it += extra
    if not np.all(np.isfinite(x)):
        raise NonFiniteBreakdown("non-finite iterate")
    if info is not None:
        info["iterations"] = it
    return _finish(A, b, x, bnorm, tol, it)
