"""
Sparse direct solvers and matrix utilities.

Matrices are ``scipy.sparse`` CSR matrices. Every solve reports its achieved
residual. Factor objects hold no shared state, so independent local problems
may be factorized and solved from several threads.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import norm as sparse_norm, splu

from .exceptions import InputError, SolverError


logger = logging.getLogger("nlmcflow.linalg")

SPD_TOL = 1.0e-10
RANK_TOL = 1.0e-10
REGULARIZATION = 1.0e-14
REFINEMENT_STEPS = 2


def as_csr(A) -> sp.csr_matrix:
    """Canonical CSR view of ``A``; a non-canonical input is copied, never sorted in place."""
    M = sp.csr_matrix(A, dtype=float)
    if not M.has_canonical_format:
        M = M.copy()
        M.sum_duplicates()
    return M


def zero_row_sum(A) -> sp.csr_matrix:
    """``A`` with its diagonal replaced by minus the off-diagonal row sums.

    The diagonal entry is stored last in its row and equals the negated
    sequential sum of the entries before it, so ``A @ ones`` is exactly zero
    in floating point. Keep the result out of ``sum_duplicates``/``sort_indices``.
    """
    A = as_csr(A)
    n = A.shape[0]
    if A.shape[1] != n:
        raise InputError(f"matrix must be square, got {A.shape}")
    off = as_csr(A - sp.diags(A.diagonal()))
    off.eliminate_zeros()
    s = off @ np.ones(n)
    ends = off.indptr[1:]
    return sp.csr_matrix(
        (np.insert(off.data, ends, -s), np.insert(off.indices, ends, np.arange(n)), off.indptr + np.arange(n + 1)),
        shape=A.shape,
    )


def max_abs(A) -> float:
    A = sp.csr_matrix(A)
    return float(abs(A).max()) if A.nnz else 0.0


def is_symmetric(A, rtol: float = 0.0) -> bool:
    """True when max|A - A^T| <= rtol * max|A|."""
    A = as_csr(A)
    if A.shape[0] != A.shape[1]:
        return False
    return max_abs(A - A.T) <= rtol * max_abs(A)


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    residual: float
    multipliers: Optional[np.ndarray] = None
    constraint_residual: float = 0.0


def _relative_residual(A: sp.csr_matrix, x: np.ndarray, b: np.ndarray, norm_A: float) -> float:
    r = np.linalg.norm(A @ x - b)
    scale = np.linalg.norm(b) + norm_A * np.linalg.norm(x)
    return float(r / scale) if scale > 0 else float(r)


class SpdFactor:
    """Sparse Cholesky-like factorization (symmetric-mode SuperLU, diagonal pivots only).

    A non-positive pivot means the matrix is not positive definite.
    """

    def __init__(self, A) -> None:
        A = as_csr(A)
        if A.shape[0] != A.shape[1]:
            raise InputError(f"matrix must be square, got {A.shape}")
        if not is_symmetric(A, 1.0e-12):
            raise SolverError("matrix is not symmetric")
        self.A = A
        self.norm = float(sparse_norm(A, np.inf)) if A.nnz else 0.0
        try:
            self._lu = splu(
                A.tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as e:
            raise SolverError(f"SPD factorization failed: {e}") from e
        pivots = self._lu.U.diagonal()
        if np.any(pivots <= 0):
            raise SolverError(f"matrix is not positive definite (pivot {pivots.min():.3e})")

    @property
    def shape(self):
        return self.A.shape

    def solve(self, b: np.ndarray) -> SolveResult:
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        for _ in range(REFINEMENT_STEPS):
            res = _relative_residual(self.A, x, b, self.norm)
            if res <= SPD_TOL * 1e-3:
                break
            x = x + self._lu.solve(b - self.A @ x)
        res = _relative_residual(self.A, x, b, self.norm)
        if res > SPD_TOL:
            raise SolverError(f"SPD solve residual {res:.3e} above tolerance {SPD_TOL:.0e}")
        return SolveResult(x=x, residual=res)


class LuFactor:
    """General sparse LU (partial pivoting), same interface as ``SpdFactor``."""

    def __init__(self, A) -> None:
        A = as_csr(A)
        if A.shape[0] != A.shape[1]:
            raise InputError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.norm = float(sparse_norm(A, np.inf)) if A.nnz else 0.0
        try:
            self._lu = splu(A.tocsc())
        except RuntimeError as e:
            raise SolverError(f"LU factorization failed: {e}") from e

    @property
    def shape(self):
        return self.A.shape

    def solve(self, b: np.ndarray) -> SolveResult:
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        for _ in range(REFINEMENT_STEPS):
            x = x + self._lu.solve(b - self.A @ x)
        return SolveResult(x=x, residual=_relative_residual(self.A, x, b, self.norm))


class DenseFactor:
    """Dense Cholesky, or dense LU when Cholesky fails, for small operators with few zeros.

    Meant for upscaled operators whose overlapping bases leave them nearly dense.
    """

    def __init__(self, A) -> None:
        A = as_csr(A)
        if A.shape[0] != A.shape[1]:
            raise InputError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.norm = float(sparse_norm(A, np.inf)) if A.nnz else 0.0
        dense = A.toarray()
        self.cholesky = is_symmetric(A, 1.0e-12)
        if self.cholesky:
            try:
                self._cho = la.cho_factor(dense, lower=True, check_finite=False)
            except la.LinAlgError:
                self.cholesky = False
        if not self.cholesky:
            self._lu = la.lu_factor(dense, check_finite=False)
            if np.any(np.diag(self._lu[0]) == 0):
                raise SolverError("dense LU factorization found a zero pivot (singular matrix)")

    @property
    def shape(self):
        return self.A.shape

    def _solve(self, b: np.ndarray) -> np.ndarray:
        if self.cholesky:
            return la.cho_solve(self._cho, b, check_finite=False)
        return la.lu_solve(self._lu, b, check_finite=False)

    def solve(self, b: np.ndarray) -> SolveResult:
        b = np.asarray(b, dtype=float)
        x = self._solve(b)
        for _ in range(REFINEMENT_STEPS):
            x = x + self._solve(b - self.A @ x)
        return SolveResult(x=x, residual=_relative_residual(self.A, x, b, self.norm))


def solve_spd(A, b: np.ndarray) -> SolveResult:
    return SpdFactor(A).solve(b)


@dataclass(frozen=True, eq=False)
class SaddleSystem:
    """[A  B^T; B  0] [x; mu] = [f; g] with constraint rows named by ``labels``."""

    A: sp.csr_matrix
    B: sp.csr_matrix
    g: np.ndarray
    f: Optional[np.ndarray] = None
    labels: Optional[Sequence[str]] = None
    regularization: bool = False


def check_constraint_rank(B, labels: Optional[Sequence[str]] = None, tol: float = RANK_TOL) -> None:
    """Raise ``SolverError`` naming a dependent constraint if B lacks full row rank."""
    B = as_csr(B)
    m = B.shape[0]
    if m == 0:
        return
    labels = list(labels) if labels is not None else [f"row {k}" for k in range(m)]
    norms = np.sqrt(np.asarray(B.multiply(B).sum(axis=1)).ravel())
    empty = np.flatnonzero(norms == 0)
    if empty.size:
        raise SolverError(f"rank-deficient constraints: {labels[empty[0]]} has no support")
    if m > B.shape[1]:
        raise SolverError(f"rank-deficient constraints: {m} rows for {B.shape[1]} unknowns ({labels[-1]})")
    Bn = sp.diags(1.0 / norms) @ B
    G = (Bn @ Bn.T).toarray()
    _, R, piv = la.qr(G, pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0]))
    if rank < m:
        raise SolverError(f"rank-deficient constraints: {labels[piv[rank]]} depends on the others")


class SaddleFactor:
    """Factorized saddle-point operator [A  B^T; B  0].

    B is scaled by max|A| / max|B| before factorization so both blocks have
    comparable magnitude; multipliers are returned unscaled. Optionally a
    -1e-14 max|A| I block regularizes the multiplier block.
    """

    def __init__(self, A, B, labels: Optional[Sequence[str]] = None, regularization: bool = False) -> None:
        A = as_csr(A)
        B = as_csr(B)
        n, m = A.shape[0], B.shape[0]
        if A.shape[1] != n or B.shape[1] != n:
            raise InputError(f"saddle blocks do not conform: A {A.shape}, B {B.shape}")
        check_constraint_rank(B, labels)
        self.A, self.B, self.n, self.m = A, B, n, m
        amax = max_abs(A) or 1.0
        self.beta = amax / (max_abs(B) or 1.0)
        lower = -REGULARIZATION * amax * sp.identity(m) if regularization else None
        K = sp.bmat([[A, self.beta * B.T], [self.beta * B, lower]], format="csc")
        self.K = K.tocsr()
        self.norm = float(sparse_norm(self.K, np.inf))
        try:
            self._lu = splu(K)
        except RuntimeError as e:
            raise SolverError(f"saddle factorization failed: {e}") from e

    def solve(self, g: np.ndarray, f: Optional[np.ndarray] = None) -> SolveResult:
        """Solve for constraint values ``g`` (vector or one column per right-hand side)."""
        g = np.asarray(g, dtype=float)
        cols = g.shape[1:] if g.ndim > 1 else ()
        f = np.zeros((self.n,) + cols) if f is None else np.asarray(f, dtype=float)
        rhs = np.concatenate([f, self.beta * g], axis=0)
        sol = self._lu.solve(rhs)
        for _ in range(REFINEMENT_STEPS):
            sol = sol + self._lu.solve(rhs - self.K @ sol)
        x = sol[:self.n]
        mu = self.beta * sol[self.n:]
        flow = self.A @ x + self.B.T @ mu - f
        scale = np.linalg.norm(f) + self.norm * np.linalg.norm(x)
        flow_res = float(np.linalg.norm(flow) / scale) if scale > 0 else float(np.linalg.norm(flow))
        cons_res = float(np.max(np.abs(self.B @ x - g))) if self.m else 0.0
        return SolveResult(x=x, residual=flow_res, multipliers=mu, constraint_residual=cons_res)


def solve_saddle(system: SaddleSystem) -> SolveResult:
    return SaddleFactor(system.A, system.B, system.labels, system.regularization).solve(system.g, system.f)


def triple_product(R, A) -> sp.csr_matrix:
    """R A R^T; exactly symmetric when A is symmetric."""
    R = as_csr(R)
    A = as_csr(A)
    if A.shape[0] != A.shape[1] or R.shape[1] != A.shape[0]:
        raise InputError(f"triple product dimensions do not conform: R {R.shape}, A {A.shape}")
    out = as_csr(R @ A @ R.T)
    if is_symmetric(A):
        out = as_csr(0.5 * (out + out.T))
    return out


def dump_matrix(path: str, A) -> str:
    """Coordinate text dump: ``# rows cols`` header, then ``row col value`` (0-based, 17 digits)."""
    C = as_csr(A).tocoo()
    order = np.lexsort((C.col, C.row))
    with open(path, "w", encoding="ascii") as f:
        f.write(f"# {C.shape[0]} {C.shape[1]}\n")
        f.writelines(f"{r} {c} {v:.17g}\n" for r, c, v in zip(C.row[order], C.col[order], C.data[order]))
    return path


def load_matrix(path: str) -> sp.csr_matrix:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "#":
            raise InputError(f"{path}:1: expected '# rows cols' header")
        shape = (int(header[1]), int(header[2]))
        data = np.loadtxt(f, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(shape)
    return sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=shape).tocsr()


def dump_vector(path: str, v: np.ndarray) -> str:
    """``# n`` header, then ``index value`` for every nonzero entry."""
    v = np.asarray(v, dtype=float).ravel()
    nz = np.flatnonzero(v)
    with open(path, "w", encoding="ascii") as f:
        f.write(f"# {len(v)}\n")
        f.writelines(f"{i} {v[i]:.17g}\n" for i in nz)
    return path


def load_vector(path: str) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "#":
            raise InputError(f"{path}:1: expected '# n' header")
        data = np.loadtxt(f, ndmin=2)
    v = np.zeros(int(header[1]))
    if data.size:
        v[data[:, 0].astype(int)] = data[:, 1]
    return v


__all__ = [
    "SolveResult",
    "SpdFactor",
    "LuFactor",
    "DenseFactor",
    "SaddleSystem",
    "SaddleFactor",
    "solve_spd",
    "solve_saddle",
    "check_constraint_rank",
    "triple_product",
    "zero_row_sum",
    "as_csr",
    "is_symmetric",
    "dump_matrix",
    "load_matrix",
    "dump_vector",
    "load_vector",
]
