"""Fast self-checks against independent oracles (the ``verify`` subcommand)."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from . import datagen, metrics, rank1
from .core import complete, contraction_factor, step1_solve
from .io import read_triplets, write_triplets
from .lsq import LiftedOperator, lsqr_min_norm
from .model import FactorPair, ObservedMatrix, Rank1State, SolverConfig


def _full_rank1(rng, m, n):
    u, v = rng.standard_normal(m), rng.standard_normal(n)
    X = rng.standard_normal((m, n))
    return u, v, X, ObservedMatrix.from_dense(X)


def check_min_norm_oracles(seed=0):
    """LSQR, normal-equation closed form and explicit pseudoinverse agree."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for m, n in [(3, 4), (5, 5), (8, 9)]:
        u, v, X, obs = _full_rank1(rng, m, n)
        op = LiftedOperator(FactorPair(u[:, None], v[:, None]), obs)
        z, _ = lsqr_min_norm(op, obs.values)
        a, b = rank1.min_norm_closed_form(u, v, X)
        zp = rank1.pseudoinverse_closed_form(u, v) @ X.ravel()
        zc = np.concatenate([a, b])
        worst = max(worst, np.abs(z - zc).max(), np.abs(zp - zc).max())
    return worst < 1e-8, f"max deviation {worst:.2e}"


def check_pseudoinverse(seed=1):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal(6), rng.standard_normal(7)
    A = rank1.lifted_matrix_rank1(u, v)
    P = rank1.pseudoinverse_closed_form(u, v)
    errs = [np.abs(A @ P @ A - A).max(), np.abs(P @ A @ P - P).max(),
            np.abs((A @ P).T - A @ P).max(), np.abs((P @ A).T - P @ A).max()]
    return max(errs) < 1e-10, f"Moore-Penrose residuals {max(errs):.2e}"


def check_adjoint(seed=2):
    rng = np.random.default_rng(seed)
    m, n, r = 9, 11, 2
    mask = rng.random((m, n)) < 0.6
    obs = ObservedMatrix.from_dense(rng.standard_normal((m, n)), mask)
    op = LiftedOperator(FactorPair(rng.standard_normal((m, r)), rng.standard_normal((n, r))), obs)
    z, y = rng.standard_normal((m + n) * r), rng.standard_normal(obs.nnz)
    lhs, rhs = op.forward(z) @ y, z @ op.adjoint(y)
    err = abs(lhs - rhs) / max(abs(lhs), 1.0)
    return err < 1e-12, f"<Az,y> vs <z,A*y> relative gap {err:.2e}"


def check_kernel(seed=3):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal(6), rng.standard_normal(7)
    obs = ObservedMatrix.from_dense(np.zeros((6, 7)))
    M = LiftedOperator(FactorPair(u[:, None], v[:, None]), obs).materialize()
    s = np.linalg.svd(M, compute_uv=False)
    nullity = int(np.sum(s <= 1e-10 * s[0])) + M.shape[1] - s.size
    return nullity == 1, f"nullity {nullity} (expected 1)"


def check_rank1_contraction(seed=4):
    rng = np.random.default_rng(seed)
    m, n = 30, 40
    u0, v0 = rng.standard_normal(m), rng.standard_normal(n)
    u0 /= np.linalg.norm(u0)
    v0 /= np.linalg.norm(v0)
    obs = ObservedMatrix.from_dense(np.outer(u0, v0))
    init = FactorPair((u0 + 0.5 * rng.standard_normal(m))[:, None], (v0 + 0.5 * rng.standard_normal(n))[:, None])
    init = FactorPair(init.U * np.sign(init.U[:, 0] @ u0), init.V * np.sign(init.V[:, 0] @ v0))
    states = []
    cfg = SolverConfig(rank=1, t_max=6, init_mode="explicit", init_factors=init, eps_exact=-1, eps_step=-1,
                       delta_rel=-1)
    complete(obs, cfg, callback=lambda t, basis, tilde: states.append(
        Rank1State.from_vectors(u0, v0, basis.U[:, 0], basis.V[:, 0])))
    worst = 0.0
    for a, b in zip(states[:-1], states[1:]):
        if contraction_factor(a.eps, a.delta) * a.error() < 1e-10:
            break
        worst = max(worst, abs(b.error() / a.error() - contraction_factor(a.eps, a.delta)))
    return worst < 1e-9, f"max ratio deviation {worst:.2e}"


def check_metrics(seed=5):
    rng = np.random.default_rng(seed)
    truth = datagen.generate_uniform(20, 20, 2, [3.0, 1.0], [seed, 0])
    omega = datagen.sample_omega(20, 20, 2, 3.0, [seed, 1])
    est = truth.dense() + 1e-3 * rng.standard_normal((20, 20))
    mask = np.zeros((20, 20), bool)
    mask[omega.rows, omega.cols] = True
    D = est - truth.dense()
    brute = np.sqrt(400 / (~mask).sum()) * np.sqrt((D[~mask] ** 2).sum()) / np.linalg.norm(truth.dense())
    got = metrics.rel_rmse_unobserved(est, truth, omega)
    return abs(got - brute) < 1e-12, f"factored vs dense gap {abs(got - brute):.2e}"


def check_triplets_roundtrip(seed=6):
    rng = np.random.default_rng(seed)
    obs = ObservedMatrix.from_dense(rng.standard_normal((7, 5)) * 10.0 ** rng.integers(-20, 20, (7, 5)),
                                    rng.random((7, 5)) < 0.5)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.triplets")
        write_triplets(obs, path)
        back = read_triplets(path)
    return back == obs, "write then read is the identity"


def check_small_completion(seed=7):
    truth = datagen.generate_uniform(40, 50, 2, [2.0, 1.0], [seed, 0])
    omega = datagen.sample_omega(40, 50, 2, 3.0, [seed, 1])
    res = complete(truth.observe(omega), SolverConfig(rank=2, t_max=50))
    rel = metrics.rel_rmse_unobserved(res, truth, omega)
    return metrics.is_success(rel), f"rel-RMSE {rel:.2e}, stop {res.stop_reason}"


CHECKS = [
    ("min-norm oracles agree", check_min_norm_oracles),
    ("pseudoinverse Moore-Penrose conditions", check_pseudoinverse),
    ("operator adjoint identity", check_adjoint),
    ("rank-1 operator kernel", check_kernel),
    ("rank-1 contraction factor", check_rank1_contraction),
    ("factored metrics vs dense", check_metrics),
    ("triplet round trip", check_triplets_roundtrip),
    ("small completion recovers", check_small_completion),
]


def run_checks(out=print) -> bool:
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"raised {exc!r}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
