"""Rank 2r iterative least squares (R2RILS) for low-rank matrix completion."""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import svds

from .lsq import LiftedOperator, LsqrReport, compute_column_scales, lsqr_min_norm
from .model import (
    CompletionResult,
    DegenerateSubspaceError,
    FactorPair,
    IterationRecord,
    ObservedMatrix,
    SolverConfig,
    UpdateVariant,
    colnorm,
)

log = logging.getLogger(__name__)


def initialize(obs: ObservedMatrix, cfg: SolverConfig) -> FactorPair:
    """Starting factors ``(U_1, V_1)`` with unit-norm columns.

    ``svd``: top-r singular vectors of the zero-filled observations.
    ``random``: i.i.d. standard normal entries, column-normalized.
    ``explicit``: ``cfg.init_factors`` column-normalized.
    """
    r = cfg.rank
    if r > min(obs.m, obs.n):
        raise ValueError(f"rank {r} exceeds min(m, n) = {min(obs.m, obs.n)}")
    if obs.row_counts().min() < r or obs.col_counts().min() < r:
        warnings.warn(
            f"some rows or columns have fewer than {r} observed entries; completion is ill-posed",
            RuntimeWarning,
            stacklevel=2,
        )
    if cfg.init_mode == "explicit":
        f = cfg.init_factors
        if f.m != obs.m or f.n != obs.n:
            raise ValueError("init_factors shape does not match observations")
        return f.normalized()
    if cfg.init_mode == "random":
        rng = np.random.default_rng(cfg.seed)
        U = rng.standard_normal((obs.m, r))
        V = rng.standard_normal((obs.n, r))
        return FactorPair(colnorm(U), colnorm(V))
    return FactorPair(*_top_singular_vectors(obs, r, cfg.seed))


def _top_singular_vectors(obs: ObservedMatrix, r: int, seed: int):
    m, n = obs.shape
    if r >= min(m, n) - 1 or m * n <= 2500:
        # ARPACK needs k < min(m, n); tiny problems are cheaper dense anyway
        W, s, Zt = np.linalg.svd(obs.dense(), full_matrices=False)
        return W[:, :r], Zt[:r].T
    X = csr_matrix((obs.values, (obs.rows, obs.cols)), shape=(m, n))
    v0 = np.random.default_rng(seed).standard_normal(min(m, n))
    W, s, Zt = svds(X, k=r, v0=v0, tol=0)
    order = np.argsort(s)[::-1]
    return W[:, order], Zt[order].T


def step1_solve(obs: ObservedMatrix, basis: FactorPair, cfg: SolverConfig) -> tuple[FactorPair, LsqrReport]:
    """Minimum-norm ``argmin_{A,B} ||U B^T + A V^T - X||_{F(Omega)}``; returns ``(A, B)``."""
    op = LiftedOperator(basis, obs)
    if cfg.normalize_ls_columns:
        op = op.with_scales(compute_column_scales(op))
    z, report = lsqr_min_norm(op, obs.values, tol=cfg.lsqr_tol, cap=cfg.lsqr_max_iter)
    return FactorPair.unstack(z, obs.m, obs.n, basis.r), report


def non_minimal_shift(tilde: FactorPair, basis: FactorPair, lam: float) -> FactorPair:
    """Move a step-I solution along the kernel direction ``(U, -V)``."""
    return FactorPair(tilde.U + lam * basis.U, tilde.V - lam * basis.V)


def step2_update(basis: FactorPair, tilde: FactorPair, variant: UpdateVariant | str = "standard",
                 beta: float = 1.0) -> FactorPair:
    """Combine the current factors with the step-I solution.

    ``beta`` weighs the current factors in the standard rule; ``beta != 1``
    gives the attenuated update ``ColNorm(beta*U + ColNorm(U~))``.
    """
    if isinstance(variant, str):
        variant = UpdateVariant.parse(variant)
    kind = variant.kind
    if kind == "naive":
        return FactorPair(colnorm(tilde.U), colnorm(tilde.V))
    if kind == "non_minimal":
        tilde = non_minimal_shift(tilde, basis, variant.lam)
    w_u, w_v = (variant.w_u, variant.w_v) if kind == "weighted" else (1.0, 1.0)
    U = colnorm(beta * basis.U + w_u * colnorm(tilde.U))
    V = colnorm(beta * basis.V + w_v * colnorm(tilde.V))
    return FactorPair(U, V)


def _lifted_factors(basis: FactorPair, tilde: FactorPair):
    # X_hat = U V~^T + U~ V^T = [U | U~] [V~ | V]^T
    return np.hstack([basis.U, tilde.U]), np.hstack([tilde.V, basis.V])


def lifted_svd(basis: FactorPair, tilde: FactorPair):
    """Thin SVD ``(W, s, Z)`` of the rank-2r lifted estimate, never forming it densely."""
    L, R = _lifted_factors(basis, tilde)
    Ql, Rl = np.linalg.qr(L)
    Qr, Rr = np.linalg.qr(R)
    W, s, Zt = np.linalg.svd(Rl @ Rr.T)
    return Ql @ W, s, Qr @ Zt.T


def rank_r_truncate(basis: FactorPair, tilde: FactorPair, r: int | None = None):
    """Best rank-r approximation ``(U_r, S, V_r)`` of ``U V~^T + U~ V^T``."""
    r = basis.r if r is None else r
    W, s, Z = lifted_svd(basis, tilde)
    return W[:, :r], s[:r], Z[:, :r]


def _lifted_step_norm(cur, prev) -> float:
    """``||L1 R1^T - L0 R0^T||_F`` via QR of the stacked factors (no cancellation)."""
    L = np.hstack([cur[0], -prev[0]])
    R = np.hstack([cur[1], prev[1]])
    return float(np.linalg.norm(np.linalg.qr(L, mode="r") @ np.linalg.qr(R, mode="r").T))


def contraction_factor(eps: float, delta: float) -> float:
    """Per-iteration error ratio of the fully observed rank-1 dynamics.

    Evaluated in a cancellation-free form, so it stays accurate for tiny
    ``eps``, ``delta`` where the ratio behaves like ``sqrt(eps^4 - eps^2 delta^2 + delta^4)``.
    """
    for name, val in (("eps", eps), ("delta", delta)):
        if not 0 <= val <= 1:
            raise ValueError(f"{name} must lie in [0, 1], got {val}")
    den = _one_minus_sqrt(eps) + _one_minus_sqrt(delta)
    if den == 0:
        return 0.0
    return math.sqrt((one_minus_overlap_next(eps) + one_minus_overlap_next(delta)) / den)


def h_fn(eps: float) -> float:
    return math.sqrt(max(0.0, 1 + 2 * eps**2 - 3 * eps**4))


def r_fn(eps: float) -> float:
    """Next overlap ``alpha_{t+1}`` as a function of the current error ``eps_t``."""
    h = h_fn(eps)
    return (1 + eps**2 + h) / math.sqrt(2 * (1 + 3 * eps**2 + h))


def one_minus_overlap_next(eps: float) -> float:
    """``1 - r(eps)`` rewritten as ``8 eps^6 / (q s (s + q))``, q = 1+eps^2+h, s = sqrt(2(1+3eps^2+h))."""
    h = h_fn(eps)
    q = 1 + eps**2 + h
    s = math.sqrt(2 * (1 + 3 * eps**2 + h))
    return 8 * eps**6 / (q * s * (s + q))


def _one_minus_sqrt(eps: float) -> float:
    return eps**2 / (1 + math.sqrt(max(0.0, 1 - eps**2)))


def optimal_weights(basis: FactorPair, tilde: FactorPair) -> tuple[float, float]:
    """Rank-1 weights that send the fully observed iteration to the exact answer in one step."""
    if basis.r != 1 or tilde.r != 1:
        raise ValueError("optimal weights are defined for rank 1 only")
    du = float(basis.U[:, 0] @ colnorm(tilde.U[:, 0]))
    dv = float(basis.V[:, 0] @ colnorm(tilde.V[:, 0]))
    if du == 0 or dv == 0:
        raise ZeroDivisionError("current estimate is orthogonal to the step-I solution")
    return 1.0 / du, 1.0 / dv


def complete(obs: ObservedMatrix, cfg: SolverConfig, callback=None) -> CompletionResult:
    """Run R2RILS and return the rank-r estimate with the smallest observed error.

    ``callback(t, basis, tilde)``, when given, is called after each step-I solve.
    """
    if obs.nnz == 0:
        raise ValueError("no observed entries")
    r = cfg.rank
    basis = initialize(obs, cfg)
    trace = []
    best = None  # (sq_err, t, U_r, S, V_r)
    prev_lifted = None
    prev_rmse = None
    stop_reason = "max_iters"
    spectrum = None

    for t in range(1, cfg.t_max + 1):
        tilde, report = step1_solve(obs, basis, cfg)
        if callback is not None:
            callback(t, basis, tilde)
        W, s, Z = lifted_svd(basis, tilde)
        spectrum = s
        U_r, S, V_r = W[:, :r], s[:r], Z[:, :r]
        resid = np.einsum("pk,pk->p", U_r[obs.rows] * S, V_r[obs.cols]) - obs.values
        sq_err = float(resid @ resid)
        rmse = math.sqrt(sq_err / obs.nnz)
        lifted = _lifted_factors(basis, tilde)
        step = math.nan if prev_lifted is None else _lifted_step_norm(lifted, prev_lifted) / math.sqrt(obs.m * obs.n)
        if best is None or sq_err < best[0]:
            best = (sq_err, t, U_r, S, V_r)

        if rmse <= cfg.eps_exact:
            stop_reason = "exact"
        elif step <= cfg.eps_step:
            stop_reason = "step"
        elif prev_rmse is not None and abs(rmse - prev_rmse) <= cfg.delta_rel * rmse:
            stop_reason = "relative_change"
        elif t == cfg.t_max:
            stop_reason = "max_iters"
        else:
            stop_reason = None

        attenuate = stop_reason is None and cfg.attenuates_at(t)
        trace.append(IterationRecord(t, rmse, step, report.iterations, attenuate))
        log.debug("iter %d rmse_obs %.3e step %.3e lsqr %d", t, rmse, step, report.iterations)
        if stop_reason not in (None, "max_iters"):
            break

        # the final iteration still updates, so final_basis is (U_{t_max+1}, V_{t_max+1})
        try:
            beta = cfg.attenuation_beta if attenuate else 1.0
            basis = step2_update(basis, tilde, cfg.update_variant, beta)
        except DegenerateSubspaceError as exc:
            log.warning("degenerate subspace at iteration %d: %s", t, exc)
            stop_reason = "degenerate"
            break
        prev_lifted, prev_rmse = lifted, rmse

    _, t_best, U_r, S, V_r = best
    return CompletionResult(
        U_r=U_r,
        S=S,
        V_r=V_r,
        best_iteration=t_best,
        trace=tuple(trace),
        stop_reason=stop_reason,
        final_basis=basis,
        lifted_spectrum=spectrum,
    )
