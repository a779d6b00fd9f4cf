import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import aligned_pair, random_mask, unit
from r2rils import datagen, metrics
from r2rils.core import (
    complete, contraction_factor, h_fn, initialize, lifted_svd, non_minimal_shift, optimal_weights, r_fn,
    rank_r_truncate, step1_solve, step2_update,
)
from r2rils.model import DegenerateSubspaceError, FactorPair, ObservedMatrix, Rank1State, SolverConfig
from r2rils.rank1 import CONTRACTION_BOUND

OFF = dict(eps_exact=-1.0, eps_step=-1.0, delta_rel=-1.0)


def rank1_problem(seed, m=20, n=25, sigma=3.0):
    rng = np.random.default_rng(seed)
    u, v = unit(rng, m), unit(rng, n)
    return rng, u, v, ObservedMatrix.from_dense(sigma * np.outer(u, v))


def principal_sines(A, B):
    Qa, Qb = np.linalg.qr(A)[0], np.linalg.qr(B)[0]
    # sines from the projection residual stay accurate for tiny angles
    return np.linalg.svd(Qa - Qb @ (Qb.T @ Qa), compute_uv=False)


# --- initialize -------------------------------------------------------------

def test_init_svd_rank1_full():
    _, u, v, obs = rank1_problem(0)
    b = initialize(obs, SolverConfig(rank=1))
    assert min(np.linalg.norm(b.U[:, 0] - u), np.linalg.norm(b.U[:, 0] + u)) < 1e-10
    np.testing.assert_allclose(np.outer(b.U[:, 0], b.V[:, 0]), np.outer(u, v), atol=1e-10)


@pytest.mark.parametrize("m,n", [(12, 15), (80, 90)])  # dense path and sparse iterative path
def test_init_svd_rank2_matches_dense_subspaces(m, n):
    truth = datagen.generate_uniform(m, n, 2, [5.0, 2.0], 3)
    obs = ObservedMatrix.from_dense(truth.dense())
    b = initialize(obs, SolverConfig(rank=2))
    W, _, Zt = np.linalg.svd(truth.dense())
    assert principal_sines(b.U, W[:, :2]).max() < 1e-8
    assert principal_sines(b.V, Zt[:2].T).max() < 1e-8


def test_init_svd_sparse_path_matches_dense_on_partial_data():
    rng = np.random.default_rng(1)
    obs = ObservedMatrix.from_dense(rng.standard_normal((70, 60)), random_mask(rng, 70, 60, 0.3))
    b = initialize(obs, SolverConfig(rank=3))
    W, _, Zt = np.linalg.svd(obs.dense())
    assert principal_sines(b.U, W[:, :3]).max() < 1e-8


def test_init_random_deterministic_unit():
    _, _, _, obs = rank1_problem(2)
    a = initialize(obs, SolverConfig(rank=2, init_mode="random", seed=5))
    b = initialize(obs, SolverConfig(rank=2, init_mode="random", seed=5))
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_allclose(np.linalg.norm(a.U, axis=0), 1, atol=1e-12)


def test_init_explicit_is_normalized_passthrough():
    _, _, _, obs = rank1_problem(3)
    f = FactorPair(np.arange(1.0, 21.0), np.ones(25))
    b = initialize(obs, SolverConfig(rank=1, init_mode="explicit", init_factors=f))
    np.testing.assert_allclose(b.U[:, 0], f.U[:, 0] / np.linalg.norm(f.U[:, 0]))


def test_init_warns_on_sparse_rows_and_rejects_big_rank():
    obs = ObservedMatrix.from_entries(3, 3, [(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)])
    with pytest.warns(RuntimeWarning):
        initialize(obs, SolverConfig(rank=2))
    with pytest.raises(ValueError):
        initialize(obs, SolverConfig(rank=4))


# --- step I -----------------------------------------------------------------

def test_step1_rank1_closed_form():
    rng, u, v, obs = rank1_problem(4, sigma=2.5)
    ut, vt = aligned_pair(rng, u, v)
    tilde, _ = step1_solve(obs, FactorPair(ut, vt), SolverConfig(rank=1))
    alpha, beta = u @ ut, v @ vt
    np.testing.assert_allclose(tilde.U[:, 0], (u - 0.5 * alpha * ut) * beta * 2.5, atol=1e-10)
    np.testing.assert_allclose(tilde.V[:, 0], (v - 0.5 * beta * vt) * alpha * 2.5, atol=1e-10)


def test_step1_exact_basis_gives_zero_lifted_residual():
    truth = datagen.generate_uniform(15, 12, 3, [3.0, 2.0, 1.0], 5)
    X = truth.dense()
    obs = ObservedMatrix.from_dense(X)
    basis = FactorPair(truth.left, truth.right)
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=3))
    lifted = basis.U @ tilde.V.T + tilde.U @ basis.V.T
    assert np.linalg.norm(lifted - X) < 1e-10 * np.linalg.norm(X)


def test_step1_local_optimality_probe():
    rng = np.random.default_rng(6)
    m, n, r = 12, 10, 2
    mask = random_mask(rng, m, n, 0.6, 2)
    obs = ObservedMatrix.from_dense(rng.standard_normal((m, n)), mask)
    basis = FactorPair(rng.standard_normal((m, r)), rng.standard_normal((n, r))).normalized()
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=r))

    def objective(A, B):
        return np.sum(((basis.U @ B.T + A @ basis.V.T) - obs.dense())[mask] ** 2)

    best = objective(tilde.U, tilde.V)
    for _ in range(20):
        assert best <= objective(tilde.U + 1e-3 * rng.standard_normal((m, r)),
                                 tilde.V + 1e-3 * rng.standard_normal((n, r))) + 1e-12


def test_step1_normalized_columns_same_fit():
    rng = np.random.default_rng(7)
    obs = ObservedMatrix.from_dense(rng.standard_normal((9, 8)), random_mask(rng, 9, 8, 0.7, 2))
    basis = FactorPair(rng.standard_normal((9, 2)), rng.standard_normal((8, 2))).normalized()
    a, _ = step1_solve(obs, basis, SolverConfig(rank=2))
    b, _ = step1_solve(obs, basis, SolverConfig(rank=2, normalize_ls_columns=True))
    fit = lambda t: (basis.U @ t.V.T + t.U @ basis.V.T)[obs.rows, obs.cols]
    np.testing.assert_allclose(fit(a), fit(b), atol=1e-8)


# --- step II ----------------------------------------------------------------

@pytest.mark.parametrize("c", [0.5, 2.0, 17.0])
def test_step2_fixed_point(c):
    rng = np.random.default_rng(8)
    basis = FactorPair(rng.standard_normal((6, 2)), rng.standard_normal((5, 2))).normalized()
    out = step2_update(basis, FactorPair(c * basis.U, c * basis.V))
    np.testing.assert_allclose(out.U, basis.U, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10).filter(lambda c: abs(c) > 1e-3 and abs(abs(c) - 1) > 1e-3),
       st.floats(0.01, 10), st.sampled_from(["standard", "naive", "weighted:1.5,0.7", "non_minimal:0.3"]))
def test_step2_unit_columns(c, beta, variant):
    rng = np.random.default_rng(9)
    basis = FactorPair(rng.standard_normal((6, 2)), rng.standard_normal((5, 2))).normalized()
    tilde = FactorPair(c * basis.U + 0.1 * rng.standard_normal((6, 2)), c * basis.V)
    out = step2_update(basis, tilde, variant, beta)
    np.testing.assert_allclose(np.linalg.norm(out.U, axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out.V, axis=0), 1, atol=1e-12)


def test_step2_naive_and_weighted_forms():
    rng = np.random.default_rng(10)
    basis = FactorPair(rng.standard_normal((6, 2)), rng.standard_normal((5, 2))).normalized()
    tilde = FactorPair(rng.standard_normal((6, 2)), rng.standard_normal((5, 2)))
    naive = step2_update(basis, tilde, "naive")
    np.testing.assert_allclose(naive.U, tilde.U / np.linalg.norm(tilde.U, axis=0))
    beta = 1 + math.sqrt(2)
    w = step2_update(basis, tilde, "standard", beta)
    expect = beta * basis.U + tilde.U / np.linalg.norm(tilde.U, axis=0)
    np.testing.assert_allclose(w.U, expect / np.linalg.norm(expect, axis=0), atol=1e-15)


def test_step2_zero_column_is_degenerate():
    basis = FactorPair(np.eye(3)[:, :1], np.eye(3)[:, :1])
    with pytest.raises(DegenerateSubspaceError):
        step2_update(basis, FactorPair(np.zeros(3), np.ones(3)))


def test_optimal_weights_single_step_exact():
    rng, u, v, obs = rank1_problem(11)
    ut, vt = aligned_pair(rng, u, v)
    basis = FactorPair(ut, vt)
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=1))
    w_u, w_v = optimal_weights(basis, tilde)
    out = step2_update(basis, tilde, f"weighted:{w_u!r},{w_v!r}")
    np.testing.assert_allclose(out.U[:, 0], u, atol=1e-12)
    np.testing.assert_allclose(out.V[:, 0], v, atol=1e-12)


def test_optimal_weights_at_truth_and_near_truth():
    rng, u, v, obs = rank1_problem(12)
    tilde, _ = step1_solve(obs, FactorPair(u, v), SolverConfig(rank=1))
    assert optimal_weights(FactorPair(u, v), tilde)[0] == pytest.approx(1.0, abs=1e-12)
    w = rng.standard_normal(u.size)
    w -= (w @ u) * u
    w /= np.linalg.norm(w)
    x = rng.standard_normal(v.size)
    x -= (x @ v) * v
    x /= np.linalg.norm(x)
    e = 1e-4
    basis = FactorPair(math.sqrt(1 - e**2) * u + e * w, math.sqrt(1 - e**2) * v + e * x)
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=1))
    for wt in optimal_weights(basis, tilde):
        assert abs(wt - 1) <= 1e-7


def test_optimal_weights_errors():
    b = FactorPair(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    with pytest.raises(ZeroDivisionError):
        optimal_weights(b, FactorPair(np.array([0.0, 1.0]), np.array([1.0, 0.0])))
    with pytest.raises(ValueError):
        optimal_weights(FactorPair(np.eye(2), np.eye(2)), FactorPair(np.eye(2), np.eye(2)))


def test_non_minimal_shift_identity_and_kernel():
    rng, u, v, obs = rank1_problem(13)
    basis = FactorPair(*aligned_pair(rng, u, v))
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=1))
    same = non_minimal_shift(tilde, basis, 0.0)
    np.testing.assert_array_equal(same.U, tilde.U)
    lifted = lambda t: basis.U @ t.V.T + t.U @ basis.V.T
    for lam in (-2.0, 0.3, 5.0):
        np.testing.assert_allclose(lifted(non_minimal_shift(tilde, basis, lam)), lifted(tilde), atol=1e-12)


def test_non_minimal_loses_quadratic_rate():
    rng, u, v, obs = rank1_problem(14, m=30, n=30)
    ut, vt = aligned_pair(rng, u, v, spread=2e-3)
    basis = FactorPair(ut, vt)
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=1))
    e0 = Rank1State.from_vectors(u, v, ut, vt).error()
    ratio = {}
    for lam in (0.0, 0.3):
        nb = step2_update(basis, tilde, f"non_minimal:{lam}")
        ratio[lam] = Rank1State.from_vectors(u, v, nb.U[:, 0], nb.V[:, 0]).error() / e0
    assert ratio[0.3] >= 10 * ratio[0.0]


# --- truncation -------------------------------------------------------------

def test_truncate_fixed_point_is_rank_r():
    rng = np.random.default_rng(15)
    basis = FactorPair(rng.standard_normal((20, 3)), rng.standard_normal((18, 3))).normalized()
    tilde = FactorPair(basis.U @ np.diag([1.0, 2.0, 3.0]), basis.V @ np.diag([0.5, -1.0, 4.0]))
    _, s, _ = lifted_svd(basis, tilde)
    assert s[3] < 1e-12 * s[0]


def test_truncate_rank1_exact():
    _, u, v, obs = rank1_problem(16, sigma=4.0)
    basis = FactorPair(u, v)
    tilde, _ = step1_solve(obs, basis, SolverConfig(rank=1))
    U, S, V = rank_r_truncate(basis, tilde)
    np.testing.assert_allclose((U * S) @ V.T, 4.0 * np.outer(u, v), atol=1e-12)


@pytest.mark.parametrize("m,n,r", [(10, 12, 1), (30, 25, 3), (50, 50, 4)])
def test_truncate_matches_dense_svd(m, n, r):
    rng = np.random.default_rng(m + n + r)
    basis = FactorPair(rng.standard_normal((m, r)), rng.standard_normal((n, r))).normalized()
    tilde = FactorPair(rng.standard_normal((m, r)), rng.standard_normal((n, r)))
    Xh = basis.U @ tilde.V.T + tilde.U @ basis.V.T
    W, s, Zt = np.linalg.svd(Xh)
    U, S, V = rank_r_truncate(basis, tilde)
    assert np.linalg.norm((U * S) @ V.T - (W[:, :r] * s[:r]) @ Zt[:r]) < 1e-10
    np.testing.assert_allclose(U.T @ U, np.eye(r), atol=1e-10)
    assert np.all(np.diff(S) <= 0) and np.all(S >= 0)


# --- scalar dynamics --------------------------------------------------------

def test_contraction_special_values():
    assert h_fn(0) == 1 and r_fn(0) == 1
    assert h_fn(1) == 0 and r_fn(1) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert contraction_factor(1, 1) == pytest.approx(math.sqrt(1 - 1 / math.sqrt(2)), abs=1e-15)
    assert contraction_factor(0, 0) == 0
    assert CONTRACTION_BOUND == pytest.approx(0.541196, abs=1e-6)


def test_contraction_literal_formula_agrees_away_from_zero():
    for e, d in [(0.3, 0.7), (0.9, 0.1), (0.5, 0.5), (1.0, 0.2)]:
        literal = math.sqrt((2 - r_fn(e) - r_fn(d)) / (2 - math.sqrt(1 - e**2) - math.sqrt(1 - d**2)))
        assert contraction_factor(e, d) == pytest.approx(literal, rel=1e-10)


def test_contraction_bound_on_grid():
    g = np.linspace(0, 1, 100)
    for e in g:
        for d in g:
            assert contraction_factor(e, d) <= CONTRACTION_BOUND * max(e, d) * (1 + 1e-12)


def test_contraction_small_argument_asymptotics():
    e, d = 1e-6, 2e-6
    assert contraction_factor(e, d) == pytest.approx(math.sqrt(e**4 - e**2 * d**2 + d**4), rel=1e-5)


@pytest.mark.parametrize("args", [(-0.1, 0.5), (0.5, 1.1), (float("nan"), 0.1)])
def test_contraction_domain(args):
    with pytest.raises(ValueError):
        contraction_factor(*args)


# --- complete ---------------------------------------------------------------

def _rank1_run(seed, T, sign=1.0, m=20, n=25):
    rng, u, v, obs = rank1_problem(seed, m, n)
    ut, vt = aligned_pair(rng, u, v)
    states = []
    cfg = SolverConfig(rank=1, t_max=T, init_mode="explicit", init_factors=FactorPair(sign * ut, vt), **OFF)
    res = complete(obs, cfg, callback=lambda t, b, _: states.append(
        Rank1State.from_vectors(u, v, b.U[:, 0], b.V[:, 0])))
    return res, states, u, v


def test_complete_rank1_contracts_and_follows_overlap_recurrence():
    _, states, _, _ = _rank1_run(17, 8)
    for a, b in zip(states[:-1], states[1:]):
        if a.error() < 1e-6:
            break
        assert b.error() <= CONTRACTION_BOUND * a.error()
        assert b.alpha == pytest.approx(r_fn(a.eps), abs=1e-10)
        assert b.beta == pytest.approx(r_fn(a.delta), abs=1e-10)


def test_complete_misaligned_sign_does_not_converge():
    res, states, u, v = _rank1_run(18, 50, sign=-1.0)
    assert states[0].alpha * states[0].beta < 0
    for s in states:
        joint = min(s.error(), Rank1State(-s.alpha, -s.beta, s.eps, s.delta).error())
        assert joint > 0.5


def test_complete_recovers_well_conditioned_200():
    truth = datagen.generate_uniform(200, 200, 3, [1.0, 1.0, 1.0], 19)
    omega = datagen.sample_omega(200, 200, 3, 3.0, 20)
    res = complete(truth.observe(omega), SolverConfig(rank=3, t_max=50))
    assert metrics.rel_rmse_unobserved(res, truth, omega) < 1e-4
    np.testing.assert_allclose(res.U_r.T @ res.U_r, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(res.V_r.T @ res.V_r, np.eye(3), atol=1e-10)


def test_complete_exact_init_converges_in_one_iteration():
    truth = datagen.generate_uniform(10, 12, 2, [1.0, 0.5], 21)
    obs = ObservedMatrix.from_dense(truth.dense())
    cfg = SolverConfig(rank=2, init_mode="explicit", init_factors=FactorPair(truth.left, truth.right))
    res = complete(obs, cfg)
    assert res.stop_reason == "exact" and res.iterations == 1 and res.trace[0].rmse_obs < 1e-15


def test_complete_best_iterate_is_first_global_minimum():
    truth = datagen.generate_uniform(40, 40, 4, [10.0, 5.0, 2.0, 1.0], 22)
    omega = datagen.sample_omega(40, 40, 4, 1.6, 23)
    res = complete(truth.observe(omega), SolverConfig(rank=4, t_max=25, **OFF))
    h = res.rmse_history()
    assert res.best_iteration == int(np.argmin(h)) + 1
    assert res.iterations == 25 and res.stop_reason == "max_iters"


def test_complete_deterministic():
    truth = datagen.generate_uniform(30, 30, 2, [2.0, 1.0], 24)
    omega = datagen.sample_omega(30, 30, 2, 2.0, 25)
    a = complete(truth.observe(omega), SolverConfig(rank=2, t_max=15))
    b = complete(truth.observe(omega), SolverConfig(rank=2, t_max=15))
    np.testing.assert_array_equal(a.U_r, b.U_r)
    assert a.trace == b.trace or all(
        (x.iter, x.rmse_obs, x.lsqr_iters) == (y.iter, y.rmse_obs, y.lsqr_iters) for x, y in zip(a.trace, b.trace))


def test_complete_attenuation_schedule_in_trace():
    truth = datagen.generate_uniform(30, 30, 3, [1.0, 1.0, 1.0], 26)
    omega = datagen.sample_omega(30, 30, 3, 1.05, 27, require_coverage=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = complete(truth.observe(omega), SolverConfig(rank=3, t_max=52, lsqr_max_iter=200, **OFF))
    assert [r.iter for r in res.trace if r.attenuated] == [41, 46, 51]
    assert len(res.trace) <= 52


def test_complete_degenerate_reports_failure_with_trace():
    obs = ObservedMatrix.from_dense(np.zeros((5, 6)))
    res = complete(obs, SolverConfig(rank=1, **OFF))
    assert res.stop_reason == "degenerate" and res.iterations == 1 and not res.converged


def test_complete_stop_rules():
    truth = datagen.generate_uniform(40, 40, 2, [1.0, 1.0], 28)
    omega = datagen.sample_omega(40, 40, 2, 3.0, 29)
    obs = datagen.add_noise(truth.observe(omega), 1e-3, 30)
    assert complete(obs, SolverConfig(rank=2, delta_rel=1e-4)).stop_reason == "relative_change"
    assert complete(obs, SolverConfig(rank=2, delta_rel=-1, eps_step=1e-6)).stop_reason == "step"
    res = complete(obs, SolverConfig(rank=2, t_max=3, delta_rel=-1))
    assert res.stop_reason == "max_iters" and res.iterations == 3


def test_fixed_point_rank_collapse_when_step_small():
    truth = datagen.generate_uniform(60, 50, 3, [3.0, 2.0, 1.0], 31)
    omega = datagen.sample_omega(60, 50, 3, 2.5, 32)
    res = complete(truth.observe(omega), SolverConfig(rank=3, eps_exact=-1, eps_step=1e-13, delta_rel=-1))
    assert res.stop_reason == "step"
    assert res.lifted_spectrum[3] <= 1e-8 * res.lifted_spectrum[0]


def test_exact_objective_implies_recovery():
    truth = datagen.generate_uniform(50, 50, 2, [2.0, 1.0], 33)
    omega = datagen.sample_omega(50, 50, 2, 2.5, 34)
    obs = truth.observe(omega)
    lifted_res = {}

    def cb(t, basis, tilde):
        fit = (np.einsum("pk,pk->p", basis.U[obs.rows], tilde.V[obs.cols])
               + np.einsum("pk,pk->p", tilde.U[obs.rows], basis.V[obs.cols]))
        lifted_res[t] = np.linalg.norm(fit - obs.values)

    res = complete(obs, SolverConfig(rank=2), callback=cb)
    assert lifted_res[res.best_iteration] < 1e-13 * np.linalg.norm(obs.values)
    assert metrics.rel_rmse_unobserved(res, truth, omega) < 1e-6


def test_callback_called_once_per_iteration_and_final_basis():
    _, u, v, obs = rank1_problem(35)
    seen = []
    res = complete(obs, SolverConfig(rank=1, t_max=4, **OFF), callback=lambda t, b, _: seen.append(t))
    assert seen == [1, 2, 3, 4]
    assert res.final_basis.r == 1
