"""Command-line front end: ``r2rils generate|complete|sweep|verify``.

Settings come from an optional ``-c`` key=value file, then ``key=value``
arguments on the command line (later wins).

Exit codes: 0 success, 1 input error, 2 not converged, 3 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import datagen, experiments, metrics
from .core import complete
from .io import (FormatError, ensure_parent, format_number, parse_config_lines, read_config, read_factors,
                 read_triplets, write_csv, write_factors, write_triplets)
from .model import DegenerateSubspaceError

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("r2rils")

GENERATE_KEYS = {"m", "n", "r", "rho", "seed", "spectrum", "scale", "model", "alpha", "count", "eta0", "out"}
COMPLETE_KEYS = {"rank", "out", "truth"} | set(experiments._SOLVER_TYPES)
SWEEP_KEYS = {"out", "base_seed", "seeds", "coverage"} | set(experiments._SOLVER_TYPES) | {
    k for d in experiments.DEFAULTS.values() for k in d}


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage mistakes are input errors, not non-convergence (argparse would exit 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_INPUT)


def gather_config(path, overrides, allowed) -> dict:
    cfg = read_config(path) if path else {}
    cfg.update(parse_config_lines(overrides, source="<command line>"))
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    return cfg


def _need(cfg, key, conv=str):
    if key not in cfg:
        raise InputError(f"missing required setting {key!r}")
    try:
        return conv(cfg[key])
    except ValueError:
        raise InputError(f"invalid value for {key!r}: {cfg[key]!r}") from None


def cmd_generate(args) -> int:
    cfg = gather_config(args.config, args.settings, GENERATE_KEYS)
    m, n, r = _need(cfg, "m", int), _need(cfg, "n", int), _need(cfg, "r", int)
    seed = int(cfg.get("seed", 0))
    out = args.out or cfg.get("out") or "problem"
    model = cfg.get("model", "uniform")
    eta0 = float(cfg.get("eta0", 0.0))
    if model == "uniform":
        spectrum = experiments.floats(cfg.get("spectrum", ",".join(["1"] * r)))
        if len(spectrum) != r:
            raise InputError(f"spectrum has {len(spectrum)} values, expected r={r}")
        spectrum = experiments.scaled_spectrum(spectrum, m, n, cfg.get("scale", "none"))
        truth = datagen.generate_uniform(m, n, r, spectrum, [seed, 0])
        omega = datagen.sample_omega(m, n, r, _need(cfg, "rho", float), [seed, 1])
    elif model == "powerlaw":
        truth = datagen.generate_power_law(m, n, r, _need(cfg, "alpha", float), [seed, 0])
        if "count" in cfg:
            omega = datagen.sample_fixed_count(m, n, r, int(cfg["count"]), [seed, 1])
        else:
            omega = datagen.sample_omega(m, n, r, _need(cfg, "rho", float), [seed, 1])
    else:
        raise InputError(f"model must be 'uniform' or 'powerlaw', got {model!r}")
    obs = datagen.add_noise(truth.observe(omega), eta0, [seed, 2])
    ensure_parent(out)
    write_triplets(obs, out + ".triplets")
    write_factors(out + ".truth", truth.left, truth.s, truth.right, comment="ground truth left diag(s) right^T")
    meta = {**{k: cfg[k] for k in cfg if k != "out"}, "model": model, "m": m, "n": n, "r": r, "seed": seed,
            "nnz": obs.nnz, "draws": omega.draws}
    if "rho" in cfg and "count" not in cfg:
        meta["sampling_p"] = datagen.sampling_probability(m, n, r, float(cfg["rho"]))
    with open(out + ".meta.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {out}.triplets ({obs.nnz} entries), {out}.truth, {out}.meta.json")
    return EXIT_OK


def cmd_complete(args) -> int:
    cfg = gather_config(args.config, args.settings, COMPLETE_KEYS)
    rank = args.rank if args.rank is not None else _need(cfg, "rank", int)
    out = args.out or cfg.get("out") or args.input.rsplit(".", 1)[0]
    obs = read_triplets(args.input)
    try:
        solver = experiments.solver_config(cfg, rank)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    res = complete(obs, solver)
    ensure_parent(out)
    write_factors(out + ".factors", res.U_r, res.S, res.V_r,
                  comment=f"rank {res.rank} estimate U_r diag(S) V_r^T, best iteration {res.best_iteration}")
    write_csv(out + ".trace.csv", ["iter", "rmse_obs", "step_norm", "lsqr_iters", "attenuated"],
              ([rec.iter, rec.rmse_obs, rec.step_norm, rec.lsqr_iters, rec.attenuated] for rec in res.trace))
    parts = [f"stop_reason={res.stop_reason}", f"iterations={res.iterations}",
             f"best_iteration={res.best_iteration}", f"rmse_obs={format_number(res.trace[res.best_iteration - 1].rmse_obs)}"]
    truth_path = cfg.get("truth")
    if truth_path:
        left, s, right = read_factors(truth_path)
        truth = datagen.GroundTruth(left, s, right)
        if obs.nnz < obs.m * obs.n:
            parts.append(f"rel_rmse={format_number(metrics.rel_rmse_unobserved(res, truth, obs))}")
        parts.append(f"rel_frob={format_number(metrics.rel_frobenius_full(res, truth))}")
    line = " ".join(parts)
    with open(out + ".summary.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(line + "\n")
    print(line)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED if res.stop_reason == "max_iters" else EXIT_INTERNAL


def cmd_sweep(args) -> int:
    cfg = gather_config(args.config, args.settings, SWEEP_KEYS)
    out = args.out or cfg.pop("out", None) or f"sweep_{args.protocol}"
    cfg.pop("out", None)
    ensure_parent(out)
    res = experiments.run_sweep(args.protocol, cfg, out, jobs=args.jobs)
    print(",".join(res["summary_header"]))
    for row in res["summary"]:
        print(",".join(v if isinstance(v, str) else format_number(v) for v in row))
    for kind, path in res["paths"].items():
        print(f"{kind}: {path}")
    failed = sum(1 for r in res["rows"] if r.get("status", "ok") != "ok")
    if failed:
        print(f"{failed} realization(s) failed; see the status column", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    ok = run_checks()
    if args.tests:
        import pytest

        ok &= pytest.main(["-q", args.tests]) == 0
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="r2rils", description="Low-rank matrix completion by rank-2r lifted least squares.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("-c", "--config", help="key=value settings file")
        sp.add_argument("-o", "--out", help="output path prefix")
        sp.epilog = "Trailing key=value arguments override the config file."

    g = sub.add_parser("generate", help="write a synthetic problem (triplets, ground truth, metadata)",
                       description="Keys: m n r rho seed spectrum scale(none|unit_rms) model(uniform|powerlaw) "
                                   "alpha count eta0 out.")
    common(g)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("complete", help="complete an observed-triplets file",
                       description="Keys: rank truth out and solver settings "
                                   f"({', '.join(sorted(experiments._SOLVER_TYPES))}).")
    c.add_argument("input", help="triplet file: 'm n nnz' header then 1-based 'i j value' lines")
    c.add_argument("-r", "--rank", type=int)
    common(c)
    c.set_defaults(func=cmd_complete)

    s = sub.add_parser("sweep", help="run a seeded experiment protocol",
                       description="Writes <out>.csv (one row per realization), <out>.summary.csv and <out>.svg.")
    s.add_argument("protocol", choices=experiments.PROTOCOLS)
    s.add_argument("-j", "--jobs", type=int, default=1, help="parallel worker processes")
    common(s)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run quick oracle checks")
    v.add_argument("--tests", metavar="DIR", help="also run the pytest suite in DIR")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        bad = [tok for tok in extra if "=" not in tok or tok.startswith("-")]
        if bad:
            parser.error(f"unrecognized arguments: {' '.join(bad)}")
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    args.settings = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FormatError, InputError, OSError, ValueError, datagen.SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateSubspaceError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
