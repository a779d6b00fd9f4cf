"""Shared domain types for the completion solver.

All containers are frozen dataclasses holding read-only numpy arrays, so
they can be passed between threads and processes without copying concerns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

COLNORM_FLOOR = 1e-300


class DegenerateSubspaceError(ArithmeticError):
    """A factor column collapsed to (numerically) zero norm."""


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def colnorm(M: np.ndarray) -> np.ndarray:
    """Scale every column of ``M`` to unit Euclidean norm."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return colnorm(M[:, None])[:, 0]
    norms = np.linalg.norm(M, axis=0)
    bad = np.flatnonzero(~(norms >= COLNORM_FLOOR))
    if bad.size:
        raise DegenerateSubspaceError(f"column(s) {bad.tolist()} have norm below {COLNORM_FLOOR:g}")
    return M / norms


class Entry(NamedTuple):
    i: int
    j: int
    x: float


@dataclass(frozen=True, eq=False)
class ObservedMatrix:
    """Observed entries ``X[i, j]`` for ``(i, j)`` in the sample set, 0-based.

    Entries are stored row-major sorted; duplicates and out-of-range indices
    raise ``ValueError``.
    """

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        m, n = int(self.m), int(self.n)
        if m < 1 or n < 1:
            raise ValueError(f"dimensions must be positive, got {m}x{n}")
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if not (rows.size == cols.size == values.size):
            raise ValueError("rows, cols and values must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n):
            raise ValueError("entry index out of range")
        lin = rows * n + cols
        order = np.argsort(lin, kind="stable")
        lin = lin[order]
        if lin.size > 1 and np.any(lin[1:] == lin[:-1]):
            p = int(np.flatnonzero(lin[1:] == lin[:-1])[0])
            raise ValueError(f"duplicate entry ({lin[p] // n}, {lin[p] % n})")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "rows", _frozen(rows[order], np.int64))
        object.__setattr__(self, "cols", _frozen(cols[order], np.int64))
        object.__setattr__(self, "values", _frozen(values[order]))

    @classmethod
    def from_entries(cls, m, n, entries) -> "ObservedMatrix":
        entries = list(entries)
        if not entries:
            return cls(m, n, [], [], [])
        i, j, x = zip(*entries)
        return cls(m, n, i, j, x)

    @classmethod
    def from_dense(cls, X, mask=None) -> "ObservedMatrix":
        X = np.asarray(X, dtype=float)
        if mask is None:
            mask = np.ones(X.shape, dtype=bool)
        i, j = np.nonzero(mask)
        return cls(X.shape[0], X.shape[1], i, j, X[i, j])

    @property
    def shape(self) -> tuple[int, int]:
        return self.m, self.n

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def entries(self) -> Iterator[Entry]:
        for i, j, x in zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()):
            yield Entry(i, j, x)

    def with_values(self, values) -> "ObservedMatrix":
        """Same index set, new values (given in canonical order)."""
        return ObservedMatrix(self.m, self.n, self.rows, self.cols, values)

    def dense(self) -> np.ndarray:
        """Zero-filled ``m x n`` array of the observations."""
        X = np.zeros((self.m, self.n))
        X[self.rows, self.cols] = self.values
        return X

    def mask(self) -> np.ndarray:
        M = np.zeros((self.m, self.n), dtype=bool)
        M[self.rows, self.cols] = True
        return M

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.m)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n)

    def __eq__(self, other):
        if not isinstance(other, ObservedMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FactorPair:
    """Column-space factor ``U`` (m x r) and row-space factor ``V`` (n x r)."""

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        V = np.asarray(self.V, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        if V.ndim == 1:
            V = V[:, None]
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
            raise ValueError(f"incompatible factor shapes {U.shape} and {V.shape}")
        object.__setattr__(self, "U", _frozen(U))
        object.__setattr__(self, "V", _frozen(V))

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n(self) -> int:
        return self.V.shape[0]

    def normalized(self) -> "FactorPair":
        return FactorPair(colnorm(self.U), colnorm(self.V))

    def stacked(self) -> np.ndarray:
        """``[vec(U); vec(V)]`` with column-major vec."""
        return np.concatenate([self.U.ravel(order="F"), self.V.ravel(order="F")])

    @classmethod
    def unstack(cls, z, m: int, n: int, r: int) -> "FactorPair":
        z = np.asarray(z, dtype=float)
        if z.size != r * (m + n):
            raise ValueError(f"expected vector of length {r * (m + n)}, got {z.size}")
        return cls(z[: m * r].reshape((m, r), order="F"), z[m * r :].reshape((n, r), order="F"))


STOP_REASONS = ("exact", "step", "relative_change", "max_iters", "degenerate")


@dataclass(frozen=True)
class UpdateVariant:
    """Step-II update rule.

    ``standard``     U+ = ColNorm(U + ColNorm(U~))
    ``naive``        U+ = ColNorm(U~)
    ``weighted``     U+ = ColNorm(U + w * ColNorm(U~)), separate weights for U and V
    ``non_minimal``  standard update applied to (U~ + lam*U, V~ - lam*V)
    """

    kind: str = "standard"
    w_u: float = 1.0
    w_v: float = 1.0
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("standard", "naive", "weighted", "non_minimal"):
            raise ValueError(f"unknown update variant {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "UpdateVariant":
        """Parse ``standard``, ``naive``, ``weighted:w_u,w_v`` or ``non_minimal:lam``."""
        kind, _, args = text.strip().partition(":")
        vals = [float(a) for a in args.split(",") if a.strip()]
        if kind == "weighted":
            if len(vals) != 2:
                raise ValueError("weighted variant needs two weights, e.g. weighted:1.5,1.2")
            return cls("weighted", w_u=vals[0], w_v=vals[1])
        if kind == "non_minimal":
            if len(vals) != 1:
                raise ValueError("non_minimal variant needs one shift, e.g. non_minimal:0.3")
            return cls("non_minimal", lam=vals[0])
        if vals:
            raise ValueError(f"variant {kind!r} takes no arguments")
        return cls(kind)

    def __str__(self):
        if self.kind == "weighted":
            return f"weighted:{self.w_u!r},{self.w_v!r}"
        if self.kind == "non_minimal":
            return f"non_minimal:{self.lam!r}"
        return self.kind


@dataclass(frozen=True)
class SolverConfig:
    rank: int
    t_max: int = 300
    lsqr_max_iter: int = 4000
    lsqr_tol: float = 1e-14
    eps_exact: float = 1e-15
    eps_step: float = 1e-15
    delta_rel: float = 1e-4
    attenuation_start: int = 40
    attenuation_beta: float = 1 + np.sqrt(2)
    attenuation_period: int = 5
    update_variant: UpdateVariant = field(default_factory=UpdateVariant)
    init_mode: str = "svd"
    init_factors: FactorPair | None = None
    normalize_ls_columns: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.update_variant, str):
            object.__setattr__(self, "update_variant", UpdateVariant.parse(self.update_variant))
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.lsqr_max_iter < 1:
            raise ValueError("lsqr_max_iter must be >= 1")
        if not self.attenuation_beta > 0:
            raise ValueError("attenuation_beta must be positive")
        if self.attenuation_period < 1:
            raise ValueError("attenuation_period must be >= 1")
        if self.init_mode not in ("svd", "random", "explicit"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.init_mode == "explicit":
            if self.init_factors is None:
                raise ValueError("explicit init_mode requires init_factors")
            if self.init_factors.r != self.rank:
                raise ValueError("init_factors rank does not match config rank")

    def attenuates_at(self, t: int) -> bool:
        """Whether the update after iteration ``t`` (1-based) uses weighted averaging."""
        if self.update_variant.kind != "standard":
            return False
        k = t - self.attenuation_start - 1
        return k >= 0 and k % self.attenuation_period == 0


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    rmse_obs: float
    step_norm: float
    lsqr_iters: int
    attenuated: bool


@dataclass(frozen=True)
class CompletionResult:
    """Best rank-r estimate ``U_r diag(S) V_r^T`` plus run diagnostics."""

    U_r: np.ndarray
    S: np.ndarray
    V_r: np.ndarray
    best_iteration: int
    trace: tuple[IterationRecord, ...]
    stop_reason: str
    final_basis: FactorPair | None = None
    # singular values of the rank-2r lifted estimate at the last iteration
    lifted_spectrum: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.stop_reason in ("exact", "step", "relative_change")

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def rank(self) -> int:
        return self.S.size

    def dense(self) -> np.ndarray:
        return (self.U_r * self.S) @ self.V_r.T

    def values_at(self, rows, cols) -> np.ndarray:
        return np.einsum("pk,pk->p", self.U_r[rows] * self.S, self.V_r[cols])

    def rmse_history(self) -> np.ndarray:
        return np.array([rec.rmse_obs for rec in self.trace])


@dataclass(frozen=True)
class Rank1State:
    """Overlaps of rank-1 estimates with the true singular vectors."""

    alpha: float
    beta: float
    eps: float
    delta: float

    def __post_init__(self):
        if not (-1 <= self.alpha <= 1 and -1 <= self.beta <= 1):
            raise ValueError("overlaps must lie in [-1, 1]")
        if not (0 <= self.eps <= 1 and 0 <= self.delta <= 1):
            raise ValueError("error magnitudes must lie in [0, 1]")

    @classmethod
    def from_overlaps(cls, alpha: float, beta: float) -> "Rank1State":
        return cls(alpha, beta, float(np.sqrt(max(0.0, 1 - alpha**2))), float(np.sqrt(max(0.0, 1 - beta**2))))

    @classmethod
    def from_vectors(cls, u, v, u_t, v_t) -> "Rank1State":
        u_t = u_t / np.linalg.norm(u_t)
        v_t = v_t / np.linalg.norm(v_t)
        alpha = float(np.clip(u @ u_t, -1, 1))
        beta = float(np.clip(v @ v_t, -1, 1))
        # orthogonal residual norms are accurate even when the overlap is ~1
        eps = float(min(1.0, np.linalg.norm(u_t - alpha * u)))
        delta = float(min(1.0, np.linalg.norm(v_t - beta * v)))
        return cls(alpha, beta, eps, delta)

    def error(self) -> float:
        """``||(u_t, v_t) - (u, v)||`` for unit vectors, computed without cancellation."""
        gap_u = self.eps**2 / (1 + self.alpha) if self.alpha > -1 else 2.0
        gap_v = self.delta**2 / (1 + self.beta) if self.beta > -1 else 2.0
        return float(np.sqrt(2 * (gap_u + gap_v)))


def observed_rmse(est, obs: ObservedMatrix) -> float:
    """Root mean squared error of ``est`` over the observed entries.

    ``est`` may be a dense array or any object with ``values_at(rows, cols)``.
    """
    if obs.nnz == 0:
        raise ValueError("no observed entries")
    if hasattr(est, "values_at"):
        pred = est.values_at(obs.rows, obs.cols)
    else:
        est = np.asarray(est, dtype=float)
        if est.shape != obs.shape:
            raise ValueError(f"estimate shape {est.shape} does not match {obs.shape}")
        pred = est[obs.rows, obs.cols]
    return float(np.linalg.norm(pred - obs.values) / np.sqrt(obs.nnz))
