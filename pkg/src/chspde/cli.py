"""Command line front end: ``chspde {simulate,study,diagnose} --config FILE``.

Exit codes: 0 success, 2 validation error, 3 solver failure threshold, 4 IO error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import FORMATS, RunConfig, load_config, parse_config
from .exceptions import CHSPDEError, ConfigError, SolverError, StudyAborted
from .harness import holder_diagnostics, mass_invariant_check, regularity_diagnostics, regularity_stability
from .harness import simulate_paths, strong_error_study
from .io import provenance, write_error_csv, write_json, write_plot, write_snapshots
from .model import energy
from .noise import build_convolution, sample_path_bundle
from .spectral import SpectralField, build_eigensystem, sobolev_norm
from .stepper import ImplicitEulerStepper, run_batch

log = logging.getLogger("chspde")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


def _formats(text):
    fmts = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fmts if f not in FORMATS]
    if bad or not fmts:
        raise argparse.ArgumentTypeError(f"formats must be drawn from {','.join(FORMATS)}")
    return fmts


def build_parser():
    parser = argparse.ArgumentParser(prog="chspde", description="Stochastic Cahn-Hilliard spectral Galerkin runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "run one trajectory and write snapshots"),
                       ("study", "coupled strong-error convergence study"),
                       ("diagnose", "moment, regularity, Hölder and mass diagnostics")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML file or bundled config name")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the file)")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
        p.add_argument("--format", type=_formats, default=None, help="comma list of csv,json,plot")
        p.add_argument("--paths", type=int, default=None, help="number of Monte Carlo paths")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    raw = copy.deepcopy(cfg.raw)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output"]["directory"] = args.out
    if args.format is not None:
        raw["output"]["formats"] = args.format
    if args.paths is not None and raw.get("study") is not None:
        raw["study"]["paths"] = args.paths
    return parse_config(raw) if raw != cfg.raw else cfg


def _record_steps(thinning, K):
    if thinning == "all":
        return list(range(K + 1))
    if thinning == "final":
        return [0, K]
    return sorted(set(range(0, K + 1, int(thinning))) | {K})


def cmd_simulate(cfg: RunConfig, args):
    out = Path(cfg.raw["output"]["directory"])
    prov = provenance(cfg.digest(), cfg.seed, "simulate")
    sch = cfg.scheme()
    eig = build_eigensystem(cfg.L, cfg.d, sch.N)
    pot, noise = cfg.potential(), cfg.noise()
    track = build_convolution(sample_path_bundle(cfg.seed, 0, eig, cfg.T, sch.dt), noise)
    stepper = ImplicitEulerStepper(eig, pot, sch)
    x0 = cfg.initial()
    ks = _record_steps(cfg.raw["output"]["thinning"], sch.K)
    t0 = time.perf_counter()
    run = run_batch(stepper, x0.coeffs, track.Z[None], np.arange(eig.n_modes), 1, sch.K, set(ks))
    wall = time.perf_counter() - t0
    if run.failed[0]:
        raise SolverError(f"trajectory failed at step {int(run.fail_step[0])}", float(run.max_residual[0]))
    ks = [k for k in ks if k in run.X]
    X = np.stack([run.X[k][0] for k in ks])
    Y = np.stack([run.Y[k][0] for k in ks])
    times = np.array(ks) * sch.dt
    meta = dict(seed=cfg.seed, path_index=0, N=sch.N, d=cfg.d, dt=sch.dt, L=cfg.L, config_sha256=cfg.digest())
    write_snapshots(out / "trajectory.bin", X, times, meta)
    J = [energy(SpectralField(y, eig), pot).total for y in (Y[0], Y[-1])]
    sidecar = {
        "config": cfg.raw,
        "seeds": {"master_seed": cfg.seed, "path_index": 0},
        "snapshots": {"file": "trajectory.bin", "steps": ks, "times": times, "n_modes": eig.n_modes},
        "residuals": {"max_residual": float(run.max_residual[0]), "total_iterations": int(run.iterations[0]),
                      "mean_iterations_per_step": float(run.iterations[0]) / max(sch.K, 1),
                      "tol_residual": sch.tol_residual, "solver": sch.solver},
        "mass_drift": mass_invariant_check(Y),
        "energy": {"initial": J[0], "final": J[1]},
        "wall_time_s": wall,
    }
    write_json(out / "trajectory.json", sidecar, prov)
    return [out / "trajectory.bin", out / "trajectory.json"]


def cmd_study(cfg: RunConfig, args):
    out = Path(cfg.raw["output"]["directory"])
    fmts = cfg.raw["output"]["formats"]
    prov = provenance(cfg.digest(), cfg.seed, "study")
    report = strong_error_study(cfg.study_plan(), threads=max(1, args.threads))
    written = []
    if "csv" in fmts:
        written.append(write_error_csv(out / "errors.csv", report.csv_rows(), prov))
    if "json" in fmts:
        written.append(write_json(out / "summary.json", {"config": cfg.raw, **report.summary()}, prov))
    if "plot" in fmts:
        for name in report.norms:
            path = out / f"rate_{report.plan.axis}_{name}.dat"
            note = f"axis={report.plan.axis} norm={name} order={report.fits[name].order!r}"
            written.append(write_plot(path, report.plot_data(name), prov, note))
    for name, fit in report.fits.items():
        log.info("%s order %.4f  CI [%.4f, %.4f]  R2 %.4f", name, fit.order, fit.ci_low, fit.ci_high, fit.r2)
    return written


def _dyadic_steps(K):
    ks, g = [], 1
    while g <= K:
        ks.append(K - g)
        g *= 2
    return ks


def cmd_diagnose(cfg: RunConfig, args):
    out = Path(cfg.raw["output"]["directory"])
    prov = provenance(cfg.digest(), cfg.seed, "diagnose")
    sch = cfg.scheme()
    st = cfg.raw.get("study") or {}
    n_paths = args.paths or int(st.get("paths") or 64)
    p = float(st.get("p") or 2.0)
    gamma = cfg.gamma
    thin = cfg.raw["output"]["thinning"]
    grid = _record_steps(thin if thin != "final" else max(1, sch.K // 64), sch.K)
    dyadic = _dyadic_steps(sch.K)
    ks = sorted(set(grid) | set(dyadic) | {sch.K})
    runs = {}
    for N in (sch.N, 2 * sch.N):
        times, Y, X, failed = simulate_paths(
            cfg.potential(), cfg.noise(), N, sch.dt, cfg.T, n_paths, seed=cfg.seed, L=cfg.L, d=cfg.d,
            X0=cfg.initial(2 * sch.N), record=ks, solver=sch.solver, tol_residual=sch.tol_residual,
            max_iters=sch.max_iters, threads=max(1, args.threads))
        if failed.sum() > 0.05 * n_paths:
            raise StudyAborted(f"{int(failed.sum())} of {n_paths} paths failed", np.flatnonzero(failed).tolist())
        runs[N] = (times, Y[~failed], X[~failed], int(failed.sum()))
    eig = build_eigensystem(cfg.L, cfg.d, sch.N)
    eig2 = build_eigensystem(cfg.L, cfg.d, 2 * sch.N)
    times, Y, X, n_fail = runs[sch.N]
    reg = regularity_diagnostics(X, eig, gamma, p)
    reg2 = regularity_diagnostics(runs[2 * sch.N][2], eig2, gamma, p)
    pos = [ks.index(k) for k in sorted(set(dyadic) | {sch.K})]
    hold = holder_diagnostics(X[:, pos], times[pos], p=p)
    sup_norm = np.sqrt(np.sum(X**2, axis=-1)).max(axis=1)
    report = {
        "config": cfg.raw,
        "n_paths": n_paths,
        "failed_paths": n_fail,
        "p": p,
        "gamma": gamma,
        "moment_sup_H": {"estimate": float(np.mean(sup_norm**p) ** (1 / p))},
        "regularity": {"N": sch.N, "estimate": reg.__dict__, "N_doubled": 2 * sch.N,
                       "estimate_doubled": reg2.__dict__, "stability_ratio": regularity_stability(reg, reg2)},
        "holder": {"slope": hold.slope, "slope_over_p": hold.slope_over_p, "target": gamma / 4,
                   "gaps": hold.gaps, "moments": hold.moments, "r2": hold.r2, "degenerate": hold.degenerate},
        "mass_drift": max(mass_invariant_check(y) for y in Y) if len(Y) else 0.0,
        "initial_H_gamma": float(sobolev_norm(cfg.initial(), gamma)),
    }
    return [write_json(out / "diagnostics.json", report, prov)]


COMMANDS = {"simulate": cmd_simulate, "study": cmd_study, "diagnose": cmd_diagnose}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CHSPDEError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        written = COMMANDS[args.command](cfg, args)
    except StudyAborted as exc:
        print(f"study aborted: {exc}; failed paths {list(exc.failed_paths)}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except CHSPDEError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
