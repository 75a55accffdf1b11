"""Dense and sparse numerical primitives.

Dense matrices are plain 2-D float64 numpy arrays. Sparse least-squares
systems are assembled in coordinate format (:class:`SparseSystem`) and
converted to CSR right before the solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import lsmr

from .errors import DidNotConverge, NonFinite, NonSquare, ShapeMismatch

DEFAULT_RANK_TOL = 1e-10


def _as_finite_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix contains NaN or Inf")
    return a


def pinv(m, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via a thin SVD.

    Singular values below ``rank_tol`` times the largest one are dropped.
    """
    a = _as_finite_matrix(m)
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    rows, cols = a.shape
    if a.size == 0:
        return np.zeros((cols, rows))
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((cols, rows))
    keep = s > rank_tol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def numerical_rank(m, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    a = _as_finite_matrix(m)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rank_tol * s[0]))


def null_space_basis(m, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as columns) of ``{x : m @ x = 0}``."""
    a = _as_finite_matrix(m)
    rows, cols = a.shape
    if cols == 0:
        return np.zeros((0, 0))
    if rows == 0:
        return np.eye(cols)
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        return np.eye(cols)
    rank = int(np.count_nonzero(s > rank_tol * s[0]))
    return vt[rank:].T.copy()


@dataclass
class SparseSystem:
    """Least-squares system ``A x ~= rhs`` stored as COO triplets."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    rhs: np.ndarray
    row_tags: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        if not (self.rows.shape == self.cols.shape == self.values.shape):
            raise ShapeMismatch("rows, cols and values must have equal length")
        if self.rhs.shape != (self.n_rows,):
            raise ShapeMismatch(f"rhs must have length {self.n_rows}")
        if self.rows.size:
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise ShapeMismatch("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise ShapeMismatch("column index out of range")
            key = self.rows * max(self.n_cols, 1) + self.cols
            if np.unique(key).size != key.size:
                raise ShapeMismatch("duplicate (row, col) entries")
        if not np.all(np.isfinite(self.rhs)) or not np.all(np.isfinite(self.values)):
            raise NonFinite("system contains NaN or Inf")

    @classmethod
    def from_dense(cls, a, rhs) -> "SparseSystem":
        a = _as_finite_matrix(a)
        r, c = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], r, c, a[r, c], rhs)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def to_csr(self) -> sp.csr_matrix:
        return sp.coo_matrix(
            (self.values, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)
        ).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


class SystemBuilder:
    """Append-only COO assembly; each block gets a contiguous row range."""

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.n_rows = 0
        self._rows, self._cols, self._vals, self._rhs = [], [], [], []
        self.row_tags = []

    def add_block(self, local_rows, cols, values, rhs, tag=None) -> None:
        rhs = np.asarray(rhs, dtype=np.float64)
        self._rows.append(np.asarray(local_rows, dtype=np.int64) + self.n_rows)
        self._cols.append(np.asarray(cols, dtype=np.int64))
        self._vals.append(np.asarray(values, dtype=np.float64))
        self._rhs.append(rhs)
        if tag is not None:
            self.row_tags.append((tag, self.n_rows, self.n_rows + rhs.size))
        self.n_rows += rhs.size

    def build(self) -> SparseSystem:
        def cat(parts, dtype):
            return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)

        return SparseSystem(
            self.n_rows,
            self.n_cols,
            cat(self._rows, np.int64),
            cat(self._cols, np.int64),
            cat(self._vals, np.float64),
            cat(self._rhs, np.float64),
            row_tags=list(self.row_tags),
        )


@dataclass
class LsmrResult:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    istop: int


def lsmr_solve(
    system: SparseSystem,
    atol: float = 1e-12,
    btol: float = 1e-12,
    max_iter: int | None = None,
) -> LsmrResult:
    """Undamped LSMR on the CSR form of ``system``.

    Raises :class:`DidNotConverge` (carrying the last iterate) when the
    iteration cap is reached.
    """
    if max_iter is None:
        max_iter = 10 * max(system.n_cols, 1)
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    a = system.to_csr()
    out = lsmr(a, system.rhs, damp=0.0, atol=atol, btol=btol, maxiter=max_iter)
    x, istop, itn = out[0], int(out[1]), int(out[2])
    residual = float(np.linalg.norm(a @ x - system.rhs))
    if istop == 7:
        raise DidNotConverge(x, residual, itn)
    return LsmrResult(x, residual, itn, istop)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost perfect matching on a square cost matrix."""
    c = _as_finite_matrix(cost)
    if c.shape[0] != c.shape[1]:
        raise NonSquare(f"cost matrix must be square, got {c.shape}")
    r, k = linear_sum_assignment(c)
    return [(int(i), int(j)) for i, j in zip(r, k)]
