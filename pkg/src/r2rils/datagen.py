"""Synthetic low-rank matrices, observation masks and noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ObservedMatrix

MAX_REDRAWS = 1000


class SamplingError(RuntimeError):
    """The row/column coverage condition was not met within the redraw cap."""


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """``X0 = left @ diag(s) @ right.T``.

    For the uniform model ``left`` and ``right`` have orthonormal columns and
    ``s`` is the spectrum; power-law matrices carry unnormalized factors.
    """

    left: np.ndarray
    s: np.ndarray
    right: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.left.shape[0]

    @property
    def n(self) -> int:
        return self.right.shape[0]

    @property
    def r(self) -> int:
        return self.s.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.m, self.n

    def dense(self) -> np.ndarray:
        return (self.left * self.s) @ self.right.T

    def values_at(self, rows, cols) -> np.ndarray:
        return np.einsum("pk,pk->p", self.left[rows] * self.s, self.right[cols])

    def observe(self, omega: "IndexSet") -> ObservedMatrix:
        if omega.shape != self.shape:
            raise ValueError("index set shape does not match ground truth")
        return ObservedMatrix(self.m, self.n, omega.rows, omega.cols, self.values_at(omega.rows, omega.cols))

    def condition_number(self) -> float:
        sv = np.linalg.svd(np.linalg.qr(self.left * self.s, mode="r") @ np.linalg.qr(self.right, mode="r").T,
                           compute_uv=False)
        return float(sv[0] / sv[self.r - 1])


@dataclass(frozen=True, eq=False)
class IndexSet:
    """Sampled positions, row-major sorted, with the number of draws it took."""

    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    draws: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.m, self.n

    @property
    def size(self) -> int:
        return int(self.rows.size)

    def __eq__(self, other):
        if not isinstance(other, IndexSet):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.rows, other.rows) and np.array_equal(
            self.cols, other.cols)

    __hash__ = None


def _orthonormal(G: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(G)
    # sign convention: first nonzero component of each column positive
    for k in range(Q.shape[1]):
        nz = np.flatnonzero(Q[:, k])
        if nz.size and Q[nz[0], k] < 0:
            Q[:, k] = -Q[:, k]
    return Q


def _sphere(rng, dim: int, count: int) -> np.ndarray:
    G = rng.standard_normal((dim, count))
    return G / np.linalg.norm(G, axis=0)


def generate_uniform(m: int, n: int, r: int, spectrum, seed) -> GroundTruth:
    """Rank-r matrix with orthonormalized random singular vectors and a given spectrum."""
    spectrum = np.asarray(spectrum, dtype=float).ravel()
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} must lie in [1, min(m, n)]")
    if spectrum.size != r:
        raise ValueError(f"spectrum has {spectrum.size} values, expected {r}")
    if np.any(spectrum <= 0) or np.any(np.diff(spectrum) > 0):
        raise ValueError("spectrum must be positive and sorted descending")
    rng = np.random.default_rng(seed)
    U = _orthonormal(_sphere(rng, m, r))
    V = _orthonormal(_sphere(rng, n, r))
    meta = {"model": "uniform", "seed": seed, "spectrum": spectrum.tolist()}
    return GroundTruth(U, spectrum, V, meta)


def generate_power_law(m: int, n: int, r: int, alpha: float, seed) -> GroundTruth:
    """``X = D U V^T D`` with Gaussian ``U``, ``V`` and ``D_ii = i^-alpha`` (1-based i)."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} must lie in [1, min(m, n)]")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((m, r))
    V = rng.standard_normal((n, r))
    d_m = power_law_diagonal(m, alpha)
    d_n = power_law_diagonal(n, alpha)
    meta = {"model": "power_law", "seed": seed, "alpha": alpha}
    return GroundTruth(d_m[:, None] * U, np.ones(r), d_n[:, None] * V, meta)


def power_law_diagonal(size: int, alpha: float) -> np.ndarray:
    return np.arange(1, size + 1, dtype=float) ** (-alpha)


def sampling_probability(m: int, n: int, r: int, rho: float) -> float:
    return rho * r * (m + n - r) / (m * n)


def _covered(mask: np.ndarray, r: int) -> bool:
    return mask.sum(axis=1).min() >= r and mask.sum(axis=0).min() >= r


def _index_set(mask: np.ndarray, draws: int) -> IndexSet:
    rows, cols = np.nonzero(mask)
    return IndexSet(mask.shape[0], mask.shape[1], rows.astype(np.int64), cols.astype(np.int64), draws)


def sample_omega(m: int, n: int, r: int, rho: float, seed, max_redraws: int = MAX_REDRAWS,
                 require_coverage: bool = True) -> IndexSet:
    """Bernoulli mask with ``p = rho r (m+n-r) / (mn)``.

    The whole mask is redrawn with fresh coins until every row and column has
    at least ``r`` entries. ``require_coverage=False`` accepts the first draw.
    """
    p = sampling_probability(m, n, r, rho)
    if p > 1 + 1e-12:
        raise ValueError(f"sampling probability {p:.4f} exceeds 1")
    if p <= 0:
        raise ValueError("oversampling ratio must be positive")
    rng = np.random.default_rng(seed)
    for draw in range(1, max_redraws + 1):
        mask = rng.random((m, n)) < p
        if not require_coverage or _covered(mask, r):
            return _index_set(mask, draw)
    raise SamplingError(f"no mask with >= {r} entries per row/column after {max_redraws} draws (p={p:.4g})")


def sample_fixed_count(m: int, n: int, r: int, count: int, seed, max_redraws: int = MAX_REDRAWS) -> IndexSet:
    """Exactly ``count`` distinct positions, uniform, redrawn until each row/column has ``r``."""
    if count > m * n:
        raise ValueError(f"count {count} exceeds m*n = {m * n}")
    if count < r * max(m, n):
        raise ValueError(f"count {count} cannot give {r} entries to each of {max(m, n)} rows/columns")
    rng = np.random.default_rng(seed)
    for draw in range(1, max_redraws + 1):
        flat = rng.choice(m * n, size=count, replace=False)
        mask = np.zeros(m * n, dtype=bool)
        mask[flat] = True
        mask = mask.reshape(m, n)
        if _covered(mask, r):
            return _index_set(mask, draw)
    raise SamplingError(f"no {count}-entry mask with >= {r} entries per row/column after {max_redraws} draws")


def add_noise(obs: ObservedMatrix, eta0: float, seed) -> ObservedMatrix:
    """Add i.i.d. ``N(0, eta0^2)`` noise to every observed value."""
    if eta0 < 0:
        raise ValueError("noise level must be nonnegative")
    if eta0 == 0:
        return obs
    rng = np.random.default_rng(seed)
    return obs.with_values(obs.values + eta0 * rng.standard_normal(obs.nnz))
