"""Lifted least-squares operator ``(A, B) -> P_Omega(U B^T + A V^T)`` and its solver.

Coefficient layout: ``z = [vec(A); vec(B)]`` with column-major ``vec``, i.e.
``A[i, k]`` sits at ``k*m + i`` and ``B[j, k]`` at ``r*m + k*n + j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import lsqr

from .model import FactorPair, ObservedMatrix

MATERIALIZE_LIMIT = 20_000_000
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class LsqrReport:
    iterations: int
    rel_residual: float
    flag: str  # "converged" or "hit_cap"

    @property
    def converged(self) -> bool:
        return self.flag == "converged"


class LiftedOperator:
    """Sparse operator of the step-I least-squares problem.

    Each observed entry ``(i, j)`` contributes one row with ``2r`` nonzeros:
    ``V[j, k]`` in the ``A[i, k]`` column and ``U[i, k]`` in the ``B[j, k]``
    column. Stored as CSR so forward and adjoint products cost ``O(r |Omega|)``.
    """

    def __init__(self, basis: FactorPair, obs: ObservedMatrix, column_scales=None):
        if basis.m != obs.m or basis.n != obs.n:
            raise ValueError(f"basis shape {basis.m}x{basis.n} does not match observations {obs.m}x{obs.n}")
        self.basis = basis
        self.obs = obs
        m, n, r = obs.m, obs.n, basis.r
        self.m, self.n, self.r = m, n, r
        rows, cols = obs.rows, obs.cols
        k = np.arange(r)
        indices = np.hstack([rows[:, None] + m * k, r * m + n * k + cols[:, None]])
        data = np.hstack([basis.V[cols], basis.U[rows]])
        indptr = np.arange(0, 2 * r * obs.nnz + 1, 2 * r)
        self.matrix = sparse.csr_matrix(
            (data.ravel(), indices.ravel(), indptr), shape=(obs.nnz, r * (m + n))
        )
        if column_scales is not None:
            column_scales = np.asarray(column_scales, dtype=float)
            if column_scales.shape != (self.ncols,):
                raise ValueError(f"column_scales must have length {self.ncols}")
            if np.any(~(column_scales > 0)):
                raise ValueError("column_scales must be positive")
            self._scaled = self.matrix @ sparse.diags(column_scales)
        else:
            self._scaled = self.matrix
        self.column_scales = column_scales

    @property
    def nrows(self) -> int:
        return self.obs.nnz

    @property
    def ncols(self) -> int:
        return self.r * (self.m + self.n)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrows, self.ncols

    def with_scales(self, column_scales) -> "LiftedOperator":
        return LiftedOperator(self.basis, self.obs, column_scales)

    def forward(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.ncols,):
            raise ValueError(f"expected coefficient vector of length {self.ncols}, got {z.shape}")
        return self._scaled @ z

    def adjoint(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.nrows,):
            raise ValueError(f"expected residual vector of length {self.nrows}, got {y.shape}")
        return self._scaled.T @ y

    def column_norms(self) -> np.ndarray:
        """Euclidean norms of the unscaled operator's columns."""
        return np.sqrt(np.asarray(self.matrix.multiply(self.matrix).sum(axis=0)).ravel())

    def materialize(self, limit: int = MATERIALIZE_LIMIT) -> np.ndarray:
        """Dense copy of the (scaled) operator; for tests and small problems only."""
        if self.nrows * self.ncols > limit:
            raise MemoryError(f"dense operator {self.nrows}x{self.ncols} exceeds size guard {limit}")
        return self._scaled.toarray()


def apply_forward(op: LiftedOperator, z) -> np.ndarray:
    return op.forward(z)


def apply_adjoint(op: LiftedOperator, y) -> np.ndarray:
    return op.adjoint(y)


def materialize(op: LiftedOperator, limit: int = MATERIALIZE_LIMIT) -> np.ndarray:
    return op.materialize(limit)


def compute_column_scales(op: LiftedOperator) -> np.ndarray:
    """Right preconditioner giving every operator column unit norm.

    Columns with norm below ``1e-12`` (e.g. rows with no observations) keep
    scale 1.
    """
    norms = op.column_norms()
    scales = np.ones_like(norms)
    ok = norms >= SCALE_FLOOR
    scales[ok] = 1.0 / norms[ok]
    return scales


def lsqr_min_norm(op: LiftedOperator, rhs, tol: float = 1e-14, cap: int = 4000):
    """Minimum-norm least-squares solution of ``op @ z ~= rhs`` by LSQR from zero.

    With column scales the iteration runs on the scaled operator and the
    solution is mapped back (``z = scales * y``), so minimality holds in the
    scaled coordinates. Reaching ``cap`` is reported, not raised.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.nrows,):
        raise ValueError(f"expected right-hand side of length {op.nrows}, got {rhs.shape}")
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros(op.ncols), LsqrReport(0, 0.0, "converged")
    # conlim=0 disables the condition-number stop; the system is rank deficient by design
    y, istop, itn, r1norm = lsqr(op._scaled, rhs, atol=tol, btol=tol, conlim=0, iter_lim=cap)[:4]
    z = y if op.column_scales is None else op.column_scales * y
    flag = "hit_cap" if istop == 7 else "converged"
    return z, LsqrReport(int(itn), float(r1norm / bnorm), flag)
