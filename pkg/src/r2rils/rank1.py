"""Closed forms for the fully observed rank-1 problem.

These serve as independent oracles for the iterative solver. Vectorization
is row-major (``vec(X)[i*n + j] = X[i, j]``), matching the canonical entry
order of a full ``ObservedMatrix``; coefficients are ordered ``(a, b)``.
"""

from __future__ import annotations

import math

import numpy as np

from .core import contraction_factor, one_minus_overlap_next
from .model import Rank1State

# worst-case contraction of the noiseless rank-1 iteration
CONTRACTION_BOUND = math.sqrt(1 - 1 / math.sqrt(2))
# constant of the noisy rank-1 error bound
NOISE_CONSTANT = 50 / (1 - CONTRACTION_BOUND)
DENSE_LIMIT = 4_000_000


def noise_condition(eta_over_sigma: float, delta: float) -> bool:
    """Whether a normalized noise level is small enough for the rank-1 noise bound."""
    return eta_over_sigma <= math.sqrt(2) * delta / NOISE_CONSTANT


def noise_error_bound(t: int, eta_over_sigma: float) -> float:
    """Error bound ``sqrt(3) R^(t-2) + 4C (1 - R^(t-2)) eta/sigma`` for ``t >= 2``."""
    decay = CONTRACTION_BOUND ** (t - 2)
    return math.sqrt(3) * decay + 4 * NOISE_CONSTANT * (1 - decay) * eta_over_sigma


def _check_pair(u_t, v_t):
    u_t = np.asarray(u_t, dtype=float).ravel()
    v_t = np.asarray(v_t, dtype=float).ravel()
    if not np.any(u_t) or not np.any(v_t):
        raise ValueError("u_t and v_t must be nonzero")
    return u_t, v_t


def min_norm_closed_form(u_t, v_t, X):
    """Minimum-norm ``(a, b)`` minimizing ``||u_t b^T + a v_t^T - X||_F``."""
    u_t, v_t = _check_pair(u_t, v_t)
    X = np.asarray(X, dtype=float)
    if X.shape != (u_t.size, v_t.size):
        raise ValueError(f"X has shape {X.shape}, expected {(u_t.size, v_t.size)}")
    nu, nv = u_t @ u_t, v_t @ v_t
    c = (u_t @ X @ v_t) / (nu + nv)
    return (X @ v_t - c * u_t) / nv, (X.T @ u_t - c * v_t) / nu


def lifted_matrix_rank1(u_t, v_t) -> np.ndarray:
    """Dense ``mn x (m+n)`` matrix of ``(a, b) -> vec(u_t b^T + a v_t^T)``."""
    u_t, v_t = _check_pair(u_t, v_t)
    m, n = u_t.size, v_t.size
    A = np.zeros((m * n, m + n))
    p = np.arange(m * n)
    A[p, p // n] = v_t[p % n]
    A[p, m + p % n] = u_t[p // n]
    return A


def pseudoinverse_closed_form(u_t, v_t, m: int | None = None, n: int | None = None) -> np.ndarray:
    """Explicit Moore-Penrose pseudoinverse of the rank-1 lifted matrix, ``(m+n) x mn``."""
    u_t, v_t = _check_pair(u_t, v_t)
    m = u_t.size if m is None else m
    n = v_t.size if n is None else n
    if (m, n) != (u_t.size, v_t.size):
        raise ValueError("m, n do not match the vector lengths")
    if (m + n) * m * n > DENSE_LIMIT:
        raise MemoryError("pseudoinverse too large for dense construction")
    nu, nv = u_t @ u_t, v_t @ v_t
    N = nu + nv
    p = np.arange(m * n)
    row, col = p // n, p % n
    top = (v_t[col] / nv) * ((np.arange(m)[:, None] == row) - np.outer(u_t, u_t[row]) / N)
    bottom = (u_t[row] / nu) * ((np.arange(n)[:, None] == col) - np.outer(v_t, v_t[col]) / N)
    return np.vstack([top, bottom])


def next_overlap(alpha: float) -> float:
    """One noiseless step of the overlap recurrence, written in terms of ``alpha``."""
    a_tilde = math.sqrt(1 - 0.75 * alpha**2)
    return (1 + (a_tilde - 0.5 * alpha) * alpha) / math.sqrt(2 - 1.5 * alpha**2 + alpha * a_tilde)


def rank1_full_dynamics(alpha_1: float, beta_1: float, T: int) -> list[Rank1State]:
    """States ``t = 1..T`` of the fully observed rank-1 iteration.

    The overlap gaps ``1 - alpha`` are propagated in closed form, so errors
    stay accurate down to ``1e-300`` instead of stalling at machine epsilon.
    """
    if not (0 < alpha_1 <= 1 and 0 < beta_1 <= 1):
        raise ValueError("initial overlaps must lie in (0, 1]")
    states = [Rank1State.from_overlaps(alpha_1, beta_1)]
    for _ in range(T - 1):
        s = states[-1]
        gu, gv = one_minus_overlap_next(s.eps), one_minus_overlap_next(s.delta)
        states.append(Rank1State(1 - gu, 1 - gv, math.sqrt(gu * (2 - gu)), math.sqrt(gv * (2 - gv))))
    return states


def error_ratios(states: list[Rank1State]) -> np.ndarray:
    """Observed ``E_{t+1}/E_t`` along a trajectory (nan once the error is exactly 0)."""
    E = np.array([s.error() for s in states])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(E[:-1] > 0, E[1:] / E[:-1], np.nan)


def predicted_ratios(states: list[Rank1State]) -> np.ndarray:
    return np.array([contraction_factor(s.eps, s.delta) for s in states[:-1]])
