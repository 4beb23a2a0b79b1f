"""Spatio-temporal Bayesian MAP filter for SAR backscatter stacks.

Each date is the minimiser of

    w1/2 |Y_n - X_n|^2_obs + w3/2 |X_n - X_{n-1}|^2 + w2/2 |D X_n|^2

with ``w_i = 1 / sigma_i^2`` and ``D`` a Neumann-closed discrete Laplacian,
so ``X_n`` solves ``[w1 O + w3 I + w2 D^T D] X_n = w1 O Y_n + w3 X_{n-1}``
where ``O`` is the diagonal observation mask. The first date drops the
temporal term. Systems are solved by conjugate gradients preconditioned with
a modified incomplete Cholesky factor (Jacobi if the factorisation breaks
down).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .raster import RasterStack

log = logging.getLogger(__name__)


class FilterConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class FilterParams:
    sigma1_sq: float = 1.0
    sigma2_sq: float = 1.0
    sigma3_sq: float = 2.0
    solver_tol: float = 1e-6
    max_iters: int = 500
    scale_by_gap: bool = False
    reference_gap: float = 12.0

    def __post_init__(self):
        for name in ("sigma1_sq", "sigma2_sq", "sigma3_sq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.solver_tol < 1:
            raise ValueError("solver_tol must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @classmethod
    def from_weights(cls, smooth: float = 1.0, temporal: float = 0.5, **kw) -> "FilterParams":
        """Parameters already scaled by sigma1^2: ``smooth = sigma1^2/sigma2^2``,
        ``temporal = sigma1^2/sigma3^2``. A zero weight switches the prior off."""
        inv = lambda w: np.inf if w == 0 else 1.0 / w  # noqa: E731
        return cls(1.0, inv(smooth), inv(temporal), **kw)

    @property
    def data_weight(self) -> float:
        return 1.0 / self.sigma1_sq

    @property
    def smooth_weight(self) -> float:
        return 1.0 / self.sigma2_sq

    @property
    def temporal_weight(self) -> float:
        return 1.0 / self.sigma3_sq


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    n1: int
    n2: int
    D: sp.csr_matrix
    DtD: sp.csr_matrix
    stencil: str = "5"

    @property
    def size(self) -> int:
        return self.n1 * self.n2


_STENCILS = {
    "5": [((-1, 0), 1.0), ((1, 0), 1.0), ((0, -1), 1.0), ((0, 1), 1.0)],
    "9": [((-1, 0), 4 / 6), ((1, 0), 4 / 6), ((0, -1), 4 / 6), ((0, 1), 4 / 6),
          ((-1, -1), 1 / 6), ((-1, 1), 1 / 6), ((1, -1), 1 / 6), ((1, 1), 1 / 6)],
}


def build_laplacian(n1: int, n2: int, stencil: str = "5") -> LaplacianOperator:
    """Discrete Laplacian on an ``n1 x n2`` grid (row-major) with Neumann closure.

    Out-of-domain neighbours are dropped and the diagonal is minus the sum of
    the remaining weights, so every row sums to zero.
    """
    if n1 < 2 or n2 < 2:
        raise ValueError("grid dimensions must be >= 2")
    if stencil not in _STENCILS:
        raise ValueError(f"unknown stencil {stencil!r}")
    idx = np.arange(n1 * n2).reshape(n1, n2)
    rows, cols, vals = [], [], []
    diag = np.zeros((n1, n2))
    for (dr, dc), w in _STENCILS[stencil]:
        src = idx[max(0, -dr):n1 - max(0, dr), max(0, -dc):n2 - max(0, dc)]
        dst = idx[max(0, dr):n1 - max(0, -dr), max(0, dc):n2 - max(0, -dc)]
        rows.append(src.ravel())
        cols.append(dst.ravel())
        vals.append(np.full(src.size, w))
        diag[max(0, -dr):n1 - max(0, dr), max(0, -dc):n2 - max(0, dc)] += w
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(-diag.ravel())
    D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n1 * n2, n1 * n2))
    D.sum_duplicates()
    DtD = (D.T @ D).tocsr()
    DtD.sort_indices()
    return LaplacianOperator(n1, n2, D, DtD, stencil)


# --- preconditioners -------------------------------------------------------

@numba.njit(cache=True)
def _mic0(indptr, indices, data, n):
    """In-place MIC(0) on the lower triangle stored CSC (rows sorted, diagonal first).

    Fill-in outside the pattern is subtracted from both affected diagonals.
    Returns False on a non-positive pivot.
    """
    for k in range(n):
        start, stop = indptr[k], indptr[k + 1]
        piv = data[start]
        if piv <= 0.0:
            return False
        dkk = np.sqrt(piv)
        data[start] = dkk
        for p in range(start + 1, stop):
            data[p] /= dkk
        for p in range(start + 1, stop):
            j = indices[p]
            ljk = data[p]
            jstart, jstop = indptr[j], indptr[j + 1]
            for q in range(p, stop):
                i = indices[q]
                upd = data[q] * ljk
                # binary search row i in column j
                lo, hi = jstart, jstop - 1
                pos = -1
                while lo <= hi:
                    mid = (lo + hi) // 2
                    r = indices[mid]
                    if r == i:
                        pos = mid
                        break
                    elif r < i:
                        lo = mid + 1
                    else:
                        hi = mid - 1
                if pos >= 0:
                    data[pos] -= upd
                else:
                    data[jstart] -= upd
                    data[indptr[i]] -= upd
    return True


@numba.njit(cache=True)
def _ic_solve(indptr, indices, data, n, r):
    y = r.copy()
    for k in range(n):
        start = indptr[k]
        y[k] /= data[start]
        yk = y[k]
        for p in range(start + 1, indptr[k + 1]):
            y[indices[p]] -= data[p] * yk
    for k in range(n - 1, -1, -1):
        start = indptr[k]
        acc = y[k]
        for p in range(start + 1, indptr[k + 1]):
            acc -= data[p] * y[indices[p]]
        y[k] = acc / data[start]
    return y


class MicPreconditioner:
    kind = "mic"

    def __init__(self, A: sp.spmatrix):
        lower = sp.tril(sp.csr_matrix(A)).tocsc()
        lower.sort_indices()
        n = lower.shape[0]
        indptr, indices = lower.indptr.astype(np.int64), lower.indices.astype(np.int64)
        if np.any(indices[indptr[:-1]] != np.arange(n)):
            raise np.linalg.LinAlgError("matrix has a structurally zero diagonal")
        data = lower.data.astype(np.float64).copy()
        if not _mic0(indptr, indices, data, n):
            raise np.linalg.LinAlgError("incomplete Cholesky breakdown")
        self._f = (indptr, indices, data, n)

    def __call__(self, r):
        return _ic_solve(*self._f, np.ascontiguousarray(r, dtype=np.float64))


class JacobiPreconditioner:
    kind = "jacobi"

    def __init__(self, A):
        d = A.diagonal() if hasattr(A, "diagonal") else np.diag(A)
        if np.any(d <= 0):
            raise np.linalg.LinAlgError("non-positive diagonal")
        self._inv = 1.0 / np.asarray(d, dtype=np.float64)

    def __call__(self, r):
        return self._inv * r


class IdentityPreconditioner:
    kind = "none"

    def __call__(self, r):
        return r


def make_preconditioner(A, kind: str = "mic"):
    if kind == "none":
        return IdentityPreconditioner()
    if kind == "jacobi":
        return JacobiPreconditioner(A)
    if kind == "mic":
        try:
            return MicPreconditioner(A)
        except np.linalg.LinAlgError as exc:
            log.warning("MIC(0) failed (%s); falling back to Jacobi", exc)
            return JacobiPreconditioner(A)
    raise ValueError(f"unknown preconditioner {kind!r}")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    preconditioner: str = "none"


def solve_spd(A, b, preconditioner="mic", tol: float = 1e-6, max_iters: int = 500,
              x0: np.ndarray | None = None) -> SolveResult:
    """Preconditioned conjugate gradients to ``|Ax - b| / |b| <= tol``.

    ``preconditioner`` is a kind name or a callable ``r -> M^{-1} r``. On
    hitting ``max_iters`` the iterate with the smallest residual is returned
    with ``converged=False``.
    """
    b = np.asarray(b, dtype=np.float64)
    M = make_preconditioner(A, preconditioner) if isinstance(preconditioner, str) else preconditioner
    kind = getattr(M, "kind", "custom")
    matvec = (lambda v: A @ v)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros_like(b), 0, 0.0, True, kind)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    rel = np.linalg.norm(r) / bnorm
    best_x, best_rel = x.copy(), rel
    if rel <= tol:
        return SolveResult(x, 0, rel, True, kind)
    z = M(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        Ap = matvec(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel < best_rel:
            best_x, best_rel = x.copy(), rel
        if rel <= tol:
            return SolveResult(x, it, rel, True, kind)
        z = M(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return SolveResult(best_x, max_iters, best_rel, False, kind)


# --- MAP updates -----------------------------------------------------------

@dataclass
class FilterState:
    estimate: np.ndarray
    day: int | None = None


@dataclass
class _SystemCache:
    entries: dict = field(default_factory=dict)

    def get(self, key, build):
        if key not in self.entries:
            self.entries[key] = build()
        return self.entries[key]


def _system(op: LaplacianOperator, obs: np.ndarray, w1: float, w3: float, w2: float):
    diag = w1 * obs.astype(np.float64) + w3
    return (sp.diags(diag) + w2 * op.DtD).tocsr()


def _observed(Y, missing):
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if missing is None:
        missing = np.isnan(Y)
    missing = np.asarray(missing, dtype=bool).reshape(-1)
    return np.where(missing, 0.0, Y), ~missing


def _solve(A, b, params, x0, cache_key=None, cache=None):
    if cache is not None:
        M = cache.get(("pre",) + cache_key, lambda: make_preconditioner(A, "mic"))
    else:
        M = make_preconditioner(A, "mic")
    res = solve_spd(A, b, M, params.solver_tol, params.max_iters, x0)
    if not res.converged:
        raise FilterConvergenceError(
            f"PCG did not reach tol {params.solver_tol} in {params.max_iters} iterations "
            f"(residual {res.residual:.3e})", res.residual)
    return res.x


def filter_first(Y0, op: LaplacianOperator, params: FilterParams, missing=None, *, _cache=None) -> np.ndarray:
    """MAP estimate of the first date (spatial prior only)."""
    y, obs = _observed(Y0, missing)
    if y.size != op.size:
        raise ValueError(f"input of length {y.size} for a {op.n1}x{op.n2} operator")
    if not obs.any():
        raise ValueError("first slice has no observed samples")
    w1, w2 = params.data_weight, params.smooth_weight
    key = (_digest(obs), w1, 0.0, w2)
    A = _cache.get(("A",) + key, lambda: _system(op, obs, w1, 0.0, w2)) if _cache else _system(op, obs, w1, 0.0, w2)
    return _solve(A, w1 * obs * y, params, None, key, _cache)


def _temporal_weight(params: FilterParams, state: FilterState, day) -> float:
    w3 = params.temporal_weight
    if params.scale_by_gap and day is not None and state.day is not None:
        w3 *= params.reference_gap / max(day - state.day, 1)
    return w3


def filter_step(Yn, state: FilterState, op: LaplacianOperator, params: FilterParams, missing=None,
                day: int | None = None, *, _cache=None) -> np.ndarray:
    """MAP estimate given the previous estimate; updates ``state`` in place."""
    y, obs = _observed(Yn, missing)
    prev = np.asarray(state.estimate, dtype=np.float64).reshape(-1)
    if y.size != op.size or prev.size != op.size:
        raise ValueError("input length does not match the operator")
    w1, w2, w3 = params.data_weight, params.smooth_weight, _temporal_weight(params, state, day)
    key = (_digest(obs), w1, w3, w2)
    build = lambda: _system(op, obs, w1, w3, w2)  # noqa: E731
    A = _cache.get(("A",) + key, build) if _cache else build()
    x = _solve(A, w1 * obs * y + w3 * prev, params, prev, key, _cache)
    state.estimate = x
    state.day = day
    return x


def map_objective(X, Y, X_prev, op: LaplacianOperator, params: FilterParams, missing=None) -> float:
    """Negative log posterior (up to a constant) minimised by the update."""
    y, obs = _observed(Y, missing)
    X = np.asarray(X, dtype=np.float64).reshape(-1)
    val = 0.5 * params.data_weight * np.sum(obs * (y - X) ** 2)
    val += 0.5 * params.smooth_weight * np.sum((op.D @ X) ** 2)
    if X_prev is not None:
        val += 0.5 * params.temporal_weight * np.sum((np.asarray(X_prev).reshape(-1) - X) ** 2)
    return float(val)


def _digest(mask):
    return hashlib.sha1(np.packbits(mask).tobytes()).hexdigest()


def filter_stack(sar: RasterStack, params: FilterParams | None = None, stencil: str = "5") -> RasterStack:
    """Filter a whole stack forward in time; output band ``sar-filtered``."""
    if sar.band not in ("sar-vv", "sar-vh"):
        raise ValueError(f"expected a raw SAR band, got {sar.band!r}")
    params = params or FilterParams.from_weights()
    op = build_laplacian(sar.height, sar.width, stencil)
    cache = _SystemCache()
    out = np.empty(sar.shape, dtype=np.float64)
    out[0] = filter_first(sar.values[0], op, params, sar.missing[0], _cache=cache).reshape(sar.height, sar.width)
    state = FilterState(out[0].reshape(-1), int(sar.days[0]))
    for t in range(1, sar.slices):
        x = filter_step(sar.values[t], state, op, params, sar.missing[t], int(sar.days[t]), _cache=cache)
        out[t] = x.reshape(sar.height, sar.width)
    return RasterStack(out.astype(np.float32), sar.days, "sar-filtered", meta=sar.meta)
