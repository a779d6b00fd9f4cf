"""Recovery error measures, evaluated from factored forms."""

from __future__ import annotations

import numpy as np

SUCCESS_THRESHOLD = 1e-4


def _factors(x):
    """Return ``(L, R)`` with ``x = L @ R.T`` for a result, ground truth or dense array."""
    if hasattr(x, "U_r"):
        return x.U_r * x.S, x.V_r
    if hasattr(x, "left"):
        return x.left * x.s, x.right
    a = np.asarray(x, dtype=float)
    return a, np.eye(a.shape[1])


def _values_at(x, rows, cols):
    if hasattr(x, "values_at"):
        return x.values_at(rows, cols)
    return np.asarray(x, dtype=float)[rows, cols]


def frobenius_diff(a, b) -> float:
    """``||a - b||_F`` for factored operands.

    Uses the triangular factors of ``[La, -Lb]`` and ``[Ra, Rb]``, so nearly
    equal operands lose no accuracy to cancellation.
    """
    La, Ra = _factors(a)
    Lb, Rb = _factors(b)
    if La.shape[0] != Lb.shape[0] or Ra.shape[0] != Rb.shape[0]:
        raise ValueError("shape mismatch")
    if La.shape == Lb.shape and Ra.shape == Rb.shape and np.array_equal(La, Lb) and np.array_equal(Ra, Rb):
        return 0.0
    Tl = np.linalg.qr(np.hstack([La, -Lb]), mode="r")
    Tr = np.linalg.qr(np.hstack([Ra, Rb]), mode="r")
    return float(np.linalg.norm(Tl @ Tr.T))


def frobenius_norm(a) -> float:
    L, R = _factors(a)
    return float(np.linalg.norm(np.linalg.qr(L, mode="r") @ np.linalg.qr(R, mode="r").T))


def _shape(x):
    L, R = _factors(x)
    return L.shape[0], R.shape[0]


def rel_rmse_unobserved(est, truth, omega) -> float:
    """Per-entry RMSE on the unobserved entries relative to ``||X0||_F / sqrt(mn)``.

    ``omega`` is anything with ``rows`` and ``cols`` arrays (an index set or
    the observed matrix itself).
    """
    m, n = _shape(truth)
    if _shape(est) != (m, n):
        raise ValueError("estimate and truth shapes differ")
    rows, cols = np.asarray(omega.rows), np.asarray(omega.cols)
    n_unobs = m * n - rows.size
    if n_unobs <= 0:
        raise ValueError("every entry is observed; the unobserved error is undefined")
    full_sq = frobenius_diff(est, truth) ** 2
    d = _values_at(est, rows, cols) - _values_at(truth, rows, cols)
    unobs_sq = max(full_sq - float(d @ d), 0.0)
    return float(np.sqrt(m * n / n_unobs) * np.sqrt(unobs_sq) / frobenius_norm(truth))


def rmse_unobserved(est, truth, omega) -> float:
    """Plain per-entry RMSE over the unobserved entries."""
    m, n = _shape(truth)
    rows, cols = np.asarray(omega.rows), np.asarray(omega.cols)
    n_unobs = m * n - rows.size
    if n_unobs <= 0:
        raise ValueError("every entry is observed; the unobserved error is undefined")
    d = _values_at(est, rows, cols) - _values_at(truth, rows, cols)
    return float(np.sqrt(max(frobenius_diff(est, truth) ** 2 - float(d @ d), 0.0) / n_unobs))


def is_success(rel_rmse: float) -> bool:
    if rel_rmse < 0:
        raise ValueError("rel-RMSE cannot be negative")
    return bool(rel_rmse < SUCCESS_THRESHOLD)


def rel_frobenius_full(est, truth) -> float:
    """``||X_hat - X||_F / ||X||_F``."""
    if _shape(est) != _shape(truth):
        raise ValueError("estimate and truth shapes differ")
    denom = frobenius_norm(truth)
    if denom == 0:
        raise ValueError("truth has zero norm")
    return frobenius_diff(est, truth) / denom
