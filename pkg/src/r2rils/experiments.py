"""Seeded synthetic experiments and parameter sweeps.

Every realization is a pure function of its parameter dict (including the
seed), so sweeps give identical rows for any ``jobs`` setting.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datagen, metrics
from .core import complete
from .io import write_csv
from .model import SolverConfig, UpdateVariant
from .plot import line_chart

log = logging.getLogger(__name__)

PROTOCOLS = ("oversampling", "noise", "powerlaw", "naive_compare", "convergence_trace")

_SOLVER_TYPES = {
    "t_max": int,
    "lsqr_max_iter": int,
    "lsqr_tol": float,
    "eps_exact": float,
    "eps_step": float,
    "delta_rel": float,
    "attenuation_start": int,
    "attenuation_beta": float,
    "attenuation_period": int,
    "update_variant": UpdateVariant.parse,
    "init_mode": str,
    "normalize_ls_columns": lambda s: str(s).strip().lower() in ("1", "true", "yes", "on"),
    "seed": int,
}

# noiseless experiments stop on exact fit or a vanishing step; the relative-change
# test is disabled because it fires on transient plateaus of hard instances
DEFAULTS = {
    "oversampling": dict(m=100, n=100, r=5, spectrum="1,1,1,1,1", scale="none", rhos="1.2,1.5,2,2.5,3",
                         seeds=10, t_max=100, delta_rel=-1),
    "noise": dict(m=200, n=200, r=5, spectrum="10,8,4,2,1", scale="unit_rms", rho=3.0, etas="1e-3,1e-2,1e-1",
                  seeds=10, t_max=100, delta_rel=0.0, eps_step=1e-12),
    "powerlaw": dict(m=200, n=200, r=5, alphas="0,0.5,0.8", count_factors="4,6,8,10", seeds=10, t_max=100,
                     delta_rel=-1),
    "naive_compare": dict(m=100, n=120, r=3, spectrum="1,1,1", scale="unit_rms", rho=5.0, seeds=5,
                          t_max_standard=30, t_max_naive=500, snapshots=50),
    "convergence_trace": dict(m=200, n=200, r=5, spectra="1,1,1,1,1;10,8,4,2,1", scale="none", rho=2.5,
                              seeds=1, t_max=100, delta_rel=-1),
}


def floats(text) -> list[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]


def solver_config(params: dict, rank: int, **overrides) -> SolverConfig:
    kw = {k: conv(params[k]) for k, conv in _SOLVER_TYPES.items() if k in params}
    kw.update(overrides)
    return SolverConfig(rank=rank, **kw)


def scaled_spectrum(spectrum, m: int, n: int, scale: str) -> np.ndarray:
    """Optionally rescale a spectrum so ``||X0||_F = sqrt(mn)`` (unit per-entry RMS)."""
    s = np.asarray(spectrum, dtype=float)
    if scale in (None, "none", ""):
        return s
    if scale == "unit_rms":
        return s * math.sqrt(m * n) / np.linalg.norm(s)
    raise ValueError(f"unknown scale {scale!r}; use 'none' or 'unit_rms'")


def derive_seed(seed: int, stream: int) -> list[int]:
    return [int(seed), int(stream)]


def uniform_instance(m, n, r, spectrum, scale, rho, seed, eta0=0.0, require_coverage=True):
    """Ground truth, index set and (noisy) observations for one uniform-model realization."""
    s = scaled_spectrum(spectrum, m, n, scale)
    truth = datagen.generate_uniform(m, n, r, s, derive_seed(seed, 0))
    omega = datagen.sample_omega(m, n, r, rho, derive_seed(seed, 1), require_coverage=require_coverage)
    obs = datagen.add_noise(truth.observe(omega), eta0, derive_seed(seed, 2))
    return truth, omega, obs


def lifted_tail_ratio(result) -> float:
    s = result.lifted_spectrum
    r = result.rank
    if s is None or s.size <= r or s[0] == 0:
        return 0.0
    return float(s[r] / s[0])


def _base_row(protocol, params, seed):
    return {"protocol": protocol, **{k: params[k] for k in sorted(params)}, "seed": seed}


def _run_guarded(fn, protocol, params, seed):
    try:
        return fn(params, seed)
    except Exception as exc:  # per-realization failures become rows, never abort a sweep
        log.warning("%s seed %s failed: %r", protocol, seed, exc)
        row = _base_row(protocol, params, seed)
        row["status"] = f"error:{type(exc).__name__}"
        return row


def _oversampling_run(params, seed):
    m, n, r = int(params["m"]), int(params["n"]), int(params["r"])
    truth, omega, obs = uniform_instance(m, n, r, floats(params["spectrum"]), params.get("scale", "none"),
                                         float(params["rho"]), seed,
                                         require_coverage=str(params.get("coverage", "1")) != "0")
    res = complete(obs, solver_config(params, r, seed=seed))
    rel = metrics.rel_rmse_unobserved(res, truth, omega)
    row = _base_row("oversampling", params, seed)
    row.update(status="ok", nnz=obs.nnz, draws=omega.draws, rel_rmse=rel, success=metrics.is_success(rel),
               iterations=res.iterations, best_iteration=res.best_iteration, stop_reason=res.stop_reason,
               lifted_tail=lifted_tail_ratio(res))
    return row


def _noise_run(params, seed):
    m, n, r = int(params["m"]), int(params["n"]), int(params["r"])
    eta0 = float(params["eta0"])
    truth, omega, obs = uniform_instance(m, n, r, floats(params["spectrum"]), params.get("scale", "none"),
                                         float(params["rho"]), seed, eta0=eta0)
    res = complete(obs, solver_config(params, r, seed=seed))
    rel = metrics.rel_rmse_unobserved(res, truth, omega)
    row = _base_row("noise", params, seed)
    row.update(status="ok", nnz=obs.nnz, rmse_unobs=metrics.rmse_unobserved(res, truth, omega), rel_rmse=rel,
               iterations=res.iterations, best_iteration=res.best_iteration, stop_reason=res.stop_reason,
               lifted_tail=lifted_tail_ratio(res))
    return row


def _powerlaw_run(params, seed):
    m, n, r = int(params["m"]), int(params["n"]), int(params["r"])
    count = int(params["count"])
    truth = datagen.generate_power_law(m, n, r, float(params["alpha"]), derive_seed(seed, 0))
    omega = datagen.sample_fixed_count(m, n, r, count, derive_seed(seed, 1))
    res = complete(truth.observe(omega), solver_config(params, r, seed=seed))
    err = metrics.rel_frobenius_full(res, truth)
    row = _base_row("powerlaw", params, seed)
    row.update(status="ok", nnz=count, rel_frob=err, success=bool(err <= 0.01), iterations=res.iterations,
               stop_reason=res.stop_reason)
    return row


def naive_compare_run(params, seed):
    """Standard and naive updates on one instance; returns per-iteration rows and naive snapshots."""
    m, n, r = int(params["m"]), int(params["n"]), int(params["r"])
    truth, omega, obs = uniform_instance(m, n, r, floats(params["spectrum"]), params.get("scale", "none"),
                                         float(params["rho"]), seed)
    keep = int(params.get("snapshots", 50))
    off = dict(eps_exact=-1.0, eps_step=-1.0, delta_rel=-1.0, seed=seed)
    rows, snaps = [], []
    for variant in ("standard", "naive"):
        t_max = int(params[f"t_max_{variant}"])
        cb = None
        if variant == "naive":
            def cb(t, basis, tilde, t_max=t_max):
                if t > t_max - keep:
                    snaps.append((t, basis.U[:, 0].copy()))
        res = complete(obs, solver_config(params, r, t_max=t_max, update_variant=UpdateVariant(variant), **off),
                       callback=cb)
        for rec in res.trace:
            row = _base_row("naive_compare", params, seed)
            row.update(status="ok", variant=variant, iter=rec.iter, rmse_obs=rec.rmse_obs)
            rows.append(row)
    return rows, snaps


def _trace_run(params, seed):
    m, n, r = int(params["m"]), int(params["n"]), int(params["r"])
    truth, omega, obs = uniform_instance(m, n, r, floats(params["spectrum"]), params.get("scale", "none"),
                                         float(params["rho"]), seed)
    res = complete(obs, solver_config(params, r, seed=seed))
    scale = math.sqrt(m * n) / metrics.frobenius_norm(truth)
    rows = []
    for rec in res.trace:
        row = _base_row("convergence_trace", params, seed)
        row.update(status="ok", iter=rec.iter, rmse_obs=rec.rmse_obs, rel_rmse_obs=rec.rmse_obs * scale,
                   lsqr_iters=rec.lsqr_iters, attenuated=rec.attenuated)
        rows.append(row)
    return rows


_RUNNERS = {
    "oversampling": _oversampling_run,
    "noise": _noise_run,
    "powerlaw": _powerlaw_run,
}


def _task(args):
    protocol, params, seed = args
    if protocol in _RUNNERS:
        return _run_guarded(_RUNNERS[protocol], protocol, params, seed)
    if protocol == "convergence_trace":
        return _trace_run(params, seed)
    return naive_compare_run(params, seed)


def _map(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_task, tasks))


def grid(protocol: str, params: dict) -> list[tuple]:
    """Expand a protocol's parameters into ``(protocol, point_params, seed)`` tasks."""
    if protocol not in DEFAULTS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")
    p = {**DEFAULTS[protocol], **params}
    base_seed = int(p.pop("base_seed", 0))
    seeds = range(base_seed, base_seed + int(p.pop("seeds")))
    p.pop("jobs", None)
    points = []
    if protocol == "oversampling":
        for rho in floats(p.pop("rhos")):
            points.append({**p, "rho": rho})
    elif protocol == "noise":
        for eta in floats(p.pop("etas")):
            points.append({**p, "eta0": eta})
    elif protocol == "powerlaw":
        n = int(p["n"])
        alphas, factors = floats(p.pop("alphas")), floats(p.pop("count_factors"))
        for a in alphas:
            for f in factors:
                points.append({**p, "alpha": a, "count_factor": f, "count": int(round(f * n * math.log(n)))})
    elif protocol == "convergence_trace":
        for spec in str(p.pop("spectra")).split(";"):
            points.append({**p, "spectrum": spec.strip()})
    else:
        points.append(p)
    for pt in points:
        for k, v in list(pt.items()):
            pt[k] = v if isinstance(v, (int, float)) else str(v)
    return [(protocol, pt, seed) for pt in points for seed in seeds]


def _num(v) -> float:
    if isinstance(v, str):
        return float(v) if v else math.nan
    return float(v)


def _median_inf(values) -> float:
    # failed realizations (nan) count as infinitely bad
    arr = np.array([math.inf if math.isnan(v) else v for v in values], dtype=float)
    return float(np.median(arr)) if arr.size else math.nan


def aggregate(protocol: str, rows: list[dict]) -> tuple[list[str], list[list]]:
    """Per-grid-point summary recomputed purely from raw rows (as dicts of str or numbers)."""
    if protocol == "oversampling":
        key, value, extra = "rho", "rel_rmse", None
    elif protocol == "noise":
        key, value, extra = "eta0", "rel_rmse", "rmse_unobs"
    elif protocol == "powerlaw":
        groups = {}
        for row in rows:
            groups.setdefault((_num(row["alpha"]), int(_num(row["count"]))), []).append(row)
        out = []
        for (a, c), grp in sorted(groups.items()):
            errs = [_num(g.get("rel_frob", "nan")) for g in grp]
            ok = sum(1 for e in errs if e <= 0.01)
            out.append([a, c, len(grp), _median_inf(errs), ok / len(grp)])
        return ["alpha", "count", "n_runs", "median_rel_frob", "recovery_rate"], out
    elif protocol == "naive_compare":
        by = {}
        for row in rows:
            by.setdefault((row["variant"], int(_num(row["seed"]))), []).append(_num(row["rmse_obs"]))
        out = []
        for variant in ("standard", "naive"):
            runs = [v for (var, _), v in sorted(by.items()) if var == variant]
            if runs:
                out.append([variant, len(runs), _median_inf([r[-1] for r in runs]), _median_inf([min(r) for r in runs]),
                            max(len(r) for r in runs)])
        return ["variant", "n_runs", "median_final_rmse_obs", "median_min_rmse_obs", "iterations"], out
    elif protocol == "convergence_trace":
        by = {}
        for row in rows:
            by.setdefault((row["spectrum"], int(_num(row["seed"]))), []).append(_num(row["rel_rmse_obs"]))
        out = [[spec, seed, len(v), v[-1], min(v)] for (spec, seed), v in sorted(by.items())]
        return ["spectrum", "seed", "iterations", "final_rel_rmse_obs", "min_rel_rmse_obs"], out
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    groups = {}
    for row in rows:
        groups.setdefault(_num(row[key]), []).append(row)
    out = []
    for k, grp in sorted(groups.items()):
        vals = [_num(g.get(value, "nan")) for g in grp]
        fail = sum(1 for v in vals if not v <= metrics.SUCCESS_THRESHOLD)
        line = [k, len(grp), _median_inf(vals)]
        if extra:
            line.append(_median_inf([_num(g.get(extra, "nan")) for g in grp]))
        line.append(fail / len(grp))
        out.append(line)
    header = [key, "n_runs", "median_rel_rmse"] + ([f"median_{extra}"] if extra else []) + ["failure_prob"]
    return header, out


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log10(xs), np.log10(ys), 1)[0])


def _columns(rows):
    cols = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    return cols


def run_sweep(protocol: str, params: dict, out_prefix, jobs: int = 1) -> dict:
    """Run a protocol, write ``<prefix>.csv``, ``<prefix>.summary.csv`` and ``<prefix>.svg``."""
    tasks = grid(protocol, params)
    log.info("%s: %d realizations, jobs=%d", protocol, len(tasks), jobs)
    results = _map(tasks, jobs)
    snapshots = []
    if protocol == "naive_compare":
        rows = []
        for (_, _, seed), (r, snaps) in zip(tasks, results):
            rows.extend(r)
            snapshots.extend((seed, t, vec) for t, vec in snaps)
    elif protocol == "convergence_trace":
        rows = [row for r in results for row in r]
    else:
        rows = results
    out_prefix = os.fspath(out_prefix)
    raw_path = out_prefix + ".csv"
    cols = _columns(rows)
    write_csv(raw_path, cols, ([row.get(c, "") for c in cols] for row in rows))
    header, summary = aggregate(protocol, rows)
    summary_path = out_prefix + ".summary.csv"
    write_csv(summary_path, header, summary)
    paths = {"raw": raw_path, "summary": summary_path, "plot": out_prefix + ".svg"}
    if snapshots:
        paths["snapshots"] = out_prefix + ".snapshots.csv"
        m = len(snapshots[0][2])
        write_csv(paths["snapshots"], ["seed", "iter"] + [f"u{i}" for i in range(m)],
                  ([s, t, *vec.tolist()] for s, t, vec in snapshots))
    _plot(protocol, header, summary, rows, paths["plot"])
    return {"paths": paths, "rows": rows, "summary_header": header, "summary": summary}


def _plot(protocol, header, summary, rows, path):
    if protocol == "oversampling":
        xs = [s[0] for s in summary]
        line_chart(path, {"median rel-RMSE": (xs, [s[2] for s in summary])}, title="Recovery vs oversampling",
                   xlabel="oversampling ratio", ylabel="median rel-RMSE", ylog=True)
    elif protocol == "noise":
        xs = [s[0] for s in summary]
        line_chart(path, {"median RMSE (unobserved)": (xs, [s[3] for s in summary])}, title="Noise stability",
                   xlabel="noise std", ylabel="RMSE", xlog=True, ylog=True)
    elif protocol == "powerlaw":
        series = {}
        for a, c, _, _, rate in summary:
            series.setdefault(f"alpha={a:g}", ([], []))
            series[f"alpha={a:g}"][0].append(c)
            series[f"alpha={a:g}"][1].append(rate)
        line_chart(path, series, title="Power-law recovery rate", xlabel="observed entries", ylabel="recovery rate")
    else:
        series = {}
        for row in rows:
            if protocol == "naive_compare":
                name = f"{row['variant']} seed {row['seed']}"
                y = row["rmse_obs"]
            else:
                name = f"sv {row['spectrum']} seed {row['seed']}"
                y = row["rel_rmse_obs"]
            series.setdefault(name, ([], []))
            series[name][0].append(float(row["iter"]))
            series[name][1].append(float(y))
        line_chart(path, series, title=protocol.replace("_", " "), xlabel="iteration", ylabel="observed RMSE",
                   ylog=True)


def config_summary(cfg: SolverConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "init_factors":
            continue
        out[f.name] = str(v) if isinstance(v, UpdateVariant) else v
    return out
