"""Coupled Monte Carlo strong-error studies and moment/regularity diagnostics.

Every path owns one set of counter-keyed draws on the finest time grid; the reference
run and every ladder rung read the same stochastic convolution from it, so the measured
error is pure discretization error of the coupled pair.  Paths are processed in fixed
chunks (independent of the worker count) and reduced in path order, which makes the
raw errors bit-identical for any number of threads.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import ParameterError, StudyAborted
from .model import Potential
from .noise import NoiseSpec, build_convolution, sample_path_bundle
from .spectral import SpectralField, _sobolev_sq, build_eigensystem
from .stepper import ImplicitEulerStepper, SolverConfig, run_batch, stride_for, validate_stepsize

__all__ = [
    "Resolution",
    "StudyPlan",
    "RateFit",
    "ErrorReport",
    "strong_error_study",
    "fit_rate",
    "simulate_paths",
    "regularity_diagnostics",
    "holder_diagnostics",
    "mass_invariant_check",
    "linear_tail_variance",
    "NORMS",
]

NORMS = ("H", "H-1", "Hgamma")
MAX_MODES = 2**18
FAILURE_ABORT_FRACTION = 0.05
NOISE_FLOOR = 1e-12


@dataclass(frozen=True, order=True)
class Resolution:
    N: int
    dt: float


def default_initial(eig, amplitude=0.5):
    """amplitude * cos(pi x_0 / L): smooth, zero mean, in every H^gamma."""
    scale = amplitude * math.sqrt(eig.L / 2.0) * math.sqrt(eig.L) ** (eig.d - 1)
    return SpectralField.basis(eig, (1,) + (0,) * (eig.d - 1), scale)


@dataclass(frozen=True)
class StudyPlan:
    """Everything a strong-error study needs; ``rungs`` and ``reference`` are :class:`Resolution`."""

    potential: Potential
    noise: NoiseSpec
    rungs: tuple
    reference: Resolution
    axis: str = "spatial"
    L: float = math.pi
    d: int = 1
    T: float = 0.5
    X0: SpectralField | None = None
    gamma: float = 1.4
    n_paths: int = 200
    p: float = 2.0
    norms: tuple = NORMS
    seed: int = 0
    solver: str = "fixed_point_with_newton_fallback"
    tol_residual: float = 1e-11
    max_iters: int = 50
    chunk_size: int = 16
    n_boot: int = 1000

    @classmethod
    def spatial(cls, Ns, N_ref, dt, **kw):
        return cls(rungs=tuple(Resolution(int(n), float(dt)) for n in Ns),
                   reference=Resolution(int(N_ref), float(dt)), axis="spatial", **kw)

    @classmethod
    def temporal(cls, dts, dt_ref, N, **kw):
        return cls(rungs=tuple(Resolution(int(N), float(t)) for t in dts),
                   reference=Resolution(int(N), float(dt_ref)), axis="temporal", **kw)

    @property
    def eig_max(self):
        return build_eigensystem(self.L, self.d, self.reference.N)

    @property
    def dt_fine(self):
        return self.reference.dt

    def initial(self):
        eig = self.eig_max
        if self.X0 is None:
            return default_initial(eig)
        return self.X0.project(eig.N) if self.X0.eig.N >= eig.N else self.X0.embed(eig)

    def config(self, res):
        return SolverConfig(dt=res.dt, K=int(round(self.T / res.dt)), N=res.N, solver=self.solver,
                            tol_residual=self.tol_residual, max_iters=self.max_iters)

    def validate(self):
        if self.axis not in ("spatial", "temporal", "joint"):
            raise ParameterError(f"axis must be spatial, temporal or joint, got {self.axis!r}")
        if not self.rungs:
            raise ParameterError("empty resolution ladder")
        if self.n_paths < 2 or self.p < 1:
            raise ParameterError("need n_paths >= 2 and p >= 1")
        bad = [n for n in self.norms if n not in NORMS]
        if bad:
            raise ParameterError(f"unknown error norms {bad}; choose from {NORMS}")
        ref = self.reference
        if (ref.N + 1) ** self.d > MAX_MODES:
            raise ParameterError(f"(N_ref+1)^d = {(ref.N + 1) ** self.d} exceeds the cap {MAX_MODES}")
        for r in self.rungs:
            if r == ref:
                raise ParameterError(f"reference {ref} coincides with a ladder rung")
            if r.N > ref.N or r.dt < ref.dt:
                raise ParameterError(f"reference {ref} is not finer than rung {r}")
            stride_for(r.dt, ref.dt)
        if self.axis == "spatial" and len({r.dt for r in self.rungs}) != 1:
            raise ParameterError("spatial ladder must share one dt")
        if self.axis == "temporal" and len({r.N for r in self.rungs}) != 1:
            raise ParameterError("temporal ladder must share one N")
        for r in (*self.rungs, ref):
            K = self.T / r.dt
            if abs(K - round(K)) > 1e-9 * K:
                raise ParameterError(f"T={self.T} is not a multiple of dt={r.dt}")
            eig = build_eigensystem(self.L, self.d, r.N)
            rep = validate_stepsize(r.dt, self.potential, eig)
            if not rep.ok:
                raise ParameterError("stepsize rule violated: " + rep.message)
        return self

    def scale(self, res):
        """Abscissa of the rate fit: 1/lambda_N (spatial) or dt (temporal, joint)."""
        if self.axis == "spatial":
            return 1.0 / build_eigensystem(self.L, self.d, res.N).lambda_N
        return res.dt


@dataclass(frozen=True)
class RateFit:
    order: float
    intercept: float
    r2: float
    ci_low: float
    ci_high: float
    n_points: int
    degenerate: bool = False
    reason: str = ""

    @property
    def ci_width(self):
        return self.ci_high - self.ci_low

    def as_dict(self):
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in self.__dict__.items()}


def _wls(x, y, w):
    """Weighted least squares slope/intercept along the last axis."""
    sw = w.sum(-1, keepdims=True)
    xm = (w * x).sum(-1, keepdims=True) / sw
    ym = (w * y).sum(-1, keepdims=True) / sw
    sxx = (w * (x - xm) ** 2).sum(-1)
    slope = (w * (x - xm) * (y - ym)).sum(-1) / sxx
    return slope, ym[..., 0] - slope * xm[..., 0]


def _moment_estimate(samples, p):
    return np.mean(samples**p, axis=-2) ** (1.0 / p)


def fit_rate(scales, errors, weights=None, samples=None, p=2.0, n_boot=1000, seed=0):
    """Fit ``error ~ C * scale^order`` by weighted least squares in log-log coordinates.

    With ``samples`` (per-path errors, shape ``(n_paths, n_points)``) the confidence
    interval is a percentile bootstrap over paths of the whole estimate-then-fit chain;
    without it the interval comes from the t-distribution of the slope.
    """
    h = np.asarray(scales, dtype=float)
    e = np.asarray(errors, dtype=float)
    n = len(h)
    if n < 3 or e.shape != h.shape:
        raise ParameterError("need at least 3 (scale, error) points")
    if np.any(h <= 0):
        raise ParameterError("scales must be positive")
    nan = float("nan")
    if np.any(~np.isfinite(e)) or np.any(e <= NOISE_FLOOR):
        return RateFit(nan, nan, nan, nan, nan, n, True, "below noise floor")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    x, y = np.log(h), np.log(e)
    slope, icpt = _wls(x, y, w)
    slope, icpt = float(slope), float(icpt)
    resid = y - (icpt + slope * x)
    ybar = np.sum(w * y) / np.sum(w)
    sst = np.sum(w * (y - ybar) ** 2)
    r2 = 1.0 - float(np.sum(w * resid**2) / sst) if sst > 0 else 1.0
    if samples is not None:
        samples = np.asarray(samples, dtype=float)
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xB0075])
        idx = rng.integers(0, len(samples), size=(n_boot, len(samples)))
        est = _moment_estimate(samples[idx], p)
        ok = np.all(est > 0, axis=1)
        bs, _ = _wls(x, np.log(np.where(est > 0, est, 1.0)), w)
        lo, hi = np.percentile(bs[ok], [2.5, 97.5])
    else:
        sxx = np.sum(w * (x - np.sum(w * x) / np.sum(w)) ** 2)
        s2 = np.sum(w * resid**2) / (n - 2)
        half = stats.t.ppf(0.975, n - 2) * math.sqrt(s2 / sxx)
        lo, hi = slope - half, slope + half
    return RateFit(slope, icpt, r2, float(lo), float(hi), n)


# ---------------------------------------------------------------------------
# path simulation


def _tracks(plan_seed, paths, eig, T, dt_fine, noise):
    return np.stack([build_convolution(sample_path_bundle(plan_seed, i, eig, T, dt_fine), noise).Z for i in paths])


def _error_norms(D, eig, norms, gamma):
    lam = eig.lambdas
    out = []
    for name in norms:
        if name == "H":
            out.append(np.sqrt(np.sum(D**2, axis=-1)))
        elif name == "H-1":
            out.append(np.sqrt(_sobolev_sq(D, lam, -1.0)))
        else:
            out.append(np.sqrt(_sobolev_sq(D, lam, gamma)))
    return np.stack(out, axis=-1)


def _study_chunk(plan, paths):
    eig_ref = plan.eig_max
    Zs = _tracks(plan.seed, paths, eig_ref, plan.T, plan.dt_fine, plan.noise)
    x0 = plan.initial()
    finals = {}
    failed = np.zeros(len(paths), dtype=bool)
    stats_ = {}
    for res in (plan.reference, *plan.rungs):
        if res in finals:
            continue
        cfg = plan.config(res)
        eig = build_eigensystem(plan.L, plan.d, res.N)
        stepper = ImplicitEulerStepper(eig, plan.potential, cfg)
        sub = eig_ref.submodes(res.N)
        run = run_batch(stepper, x0.coeffs[sub], Zs, sub, stride_for(res.dt, plan.dt_fine), cfg.K, {cfg.K})
        full = np.zeros((len(paths), eig_ref.n_modes))
        full[:, sub] = run.X[cfg.K]
        finals[res] = full
        failed |= run.failed
        stats_[res] = (run.max_residual, run.iterations)
    ref = finals[plan.reference]
    errs = np.stack([_error_norms(finals[r] - ref, eig_ref, plan.norms, plan.gamma) for r in plan.rungs], axis=1)
    errs[failed] = np.nan
    return errs, failed, stats_


def _chunks(n, size):
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, chunks, threads):
    if threads <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


@dataclass
class ErrorReport:
    """Per-rung strong-error estimates, fitted orders and the raw per-path errors."""

    plan: StudyPlan
    raw: np.ndarray
    path_ok: np.ndarray
    estimates: np.ndarray
    stderr: np.ndarray
    fits: dict
    metadata: dict = field(default_factory=dict)

    @property
    def rungs(self):
        return self.plan.rungs

    @property
    def norms(self):
        return self.plan.norms

    @property
    def ci_low(self):
        return self.estimates - 1.96 * self.stderr

    @property
    def ci_high(self):
        return self.estimates + 1.96 * self.stderr

    def order(self, norm="H"):
        return self.fits[norm].order

    def estimate(self, norm="H"):
        return self.estimates[:, self.norms.index(norm)]

    def csv_rows(self):
        """(path_index, N, dt, norm, error, seed) for every retained path, in path order."""
        rows = []
        for i in np.flatnonzero(self.path_ok):
            for r, res in enumerate(self.rungs):
                for n, name in enumerate(self.norms):
                    rows.append((int(i), res.N, res.dt, name, float(self.raw[i, r, n]), self.plan.seed))
        return rows

    def plot_data(self, norm="H"):
        """log10 of the natural scale (lambda_N or dt) against log10 of the error."""
        n = self.norms.index(norm)
        if self.plan.axis == "spatial":
            xs = [build_eigensystem(self.plan.L, self.plan.d, r.N).lambda_N for r in self.rungs]
        else:
            xs = [r.dt for r in self.rungs]
        return np.column_stack([np.log10(xs), np.log10(self.estimates[:, n])])

    def summary(self):
        rungs = []
        for r, res in enumerate(self.rungs):
            entry = {"N": res.N, "dt": res.dt, "scale": self.plan.scale(res)}
            for n, name in enumerate(self.norms):
                entry[name] = {"estimate": float(self.estimates[r, n]), "stderr": float(self.stderr[r, n]),
                               "ci95": [float(self.ci_low[r, n]), float(self.ci_high[r, n])]}
            rungs.append(entry)
        return {
            "axis": self.plan.axis,
            "p": self.plan.p,
            "gamma": self.plan.gamma,
            "reference": {"N": self.plan.reference.N, "dt": self.plan.reference.dt},
            "rungs": rungs,
            "fits": {k: v.as_dict() for k, v in self.fits.items()},
            "metadata": self.metadata,
        }


def strong_error_study(plan, threads=1):
    """Coupled strong-error study: ``(E||X_rung(T) - X_ref(T)||^p)^(1/p)`` per rung and norm."""
    plan.validate()
    t0 = time.perf_counter()
    chunks = _chunks(plan.n_paths, plan.chunk_size)
    results = _map_chunks(lambda c: _study_chunk(plan, c), chunks, threads)
    raw = np.concatenate([r[0] for r in results])
    failed = np.concatenate([r[1] for r in results])
    n_fail = int(failed.sum())
    if n_fail > FAILURE_ABORT_FRACTION * plan.n_paths:
        raise StudyAborted(f"{n_fail} of {plan.n_paths} paths failed (> {FAILURE_ABORT_FRACTION:.0%})",
                           np.flatnonzero(failed).tolist())
    ok = ~failed
    good = raw[ok]
    p = plan.p
    mom = np.mean(good**p, axis=0)
    est = mom ** (1.0 / p)
    se_mom = np.std(good**p, axis=0, ddof=1) / math.sqrt(len(good))
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(est > 0, se_mom * est ** (1.0 - p) / p, 0.0)
    scales = np.array([plan.scale(r) for r in plan.rungs])
    fits = {}
    for n, name in enumerate(plan.norms):
        if len(plan.rungs) < 3:
            fits[name] = RateFit(*(float("nan"),) * 5, len(plan.rungs), True, "fewer than 3 rungs")
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(se[:, n] > 0, (est[:, n] / se[:, n]) ** 2, 1.0)
        w = w / w.max() if np.all(np.isfinite(w)) and w.max() > 0 else np.ones_like(w)
        fits[name] = fit_rate(scales, est[:, n], w, good[:, :, n], p=p, n_boot=plan.n_boot, seed=plan.seed + n)
    max_res = max(float(np.max(s[0])) for r in results for s in r[2].values())
    meta = {
        "seed": plan.seed,
        "n_paths": plan.n_paths,
        "failed_paths": np.flatnonzero(failed).tolist(),
        "solver": plan.solver,
        "tol_residual": plan.tol_residual,
        "max_iters": plan.max_iters,
        "max_residual": max_res,
        "wall_time_s": time.perf_counter() - t0,
        "threads": threads,
    }
    return ErrorReport(plan, raw, ok, est, se, fits, meta)


def linear_tail_variance(eig_ref, N, noise, T):
    """E||X_N(T) - X_ref(T)||^2 for f = 0: sum over N < |j| <= N_ref of q_j (1 - e^{-2 lambda_j^2 T}) / (2 lambda_j^2)."""
    lam = eig_ref.lambdas
    q = noise.q(eig_ref)
    tail = eig_ref.mode_index.max(axis=1) > N
    a = lam[tail] ** 2
    return float(np.sum(q[tail] * -np.expm1(-2 * a * T) / (2 * a)))


# ---------------------------------------------------------------------------
# diagnostics


def simulate_paths(potential, noise, N, dt, T, n_paths, seed=0, L=math.pi, d=1, X0=None, record="all",
                   solver="fixed_point_with_newton_fallback", tol_residual=1e-11, max_iters=50,
                   chunk_size=16, threads=1, dt_fine=None):
    """Simulate ``n_paths`` coupled trajectories; returns ``(times, Y, X, failed)``.

    ``Y`` and ``X`` have shape (n_paths, n_recorded, n_modes).  ``dt_fine`` (default ``dt``)
    sets the grid of the shared draws, so runs with different ``dt`` stay coupled.
    """
    eig = build_eigensystem(L, d, N)
    dt_fine = dt if dt_fine is None else dt_fine
    cfg = SolverConfig(dt=dt, K=int(round(T / dt)), N=N, solver=solver, tol_residual=tol_residual,
                       max_iters=max_iters)
    stride = stride_for(dt, dt_fine)
    x0 = default_initial(eig) if X0 is None else (X0.project(N) if X0.eig.N >= N else X0.embed(eig))
    if record == "all":
        ks = list(range(cfg.K + 1))
    elif record == "final":
        ks = [0, cfg.K]
    else:
        ks = sorted({int(k) for k in record})
    stepper = ImplicitEulerStepper(eig, potential, cfg)

    def job(paths):
        Zs = _tracks(seed, paths, eig, T, dt_fine, noise)
        run = run_batch(stepper, x0.coeffs, Zs, np.arange(eig.n_modes), stride, cfg.K, set(ks))
        return (np.stack([run.Y[k] for k in ks], axis=1), np.stack([run.X[k] for k in ks], axis=1), run.failed)

    out = _map_chunks(job, _chunks(n_paths, chunk_size), threads)
    Y = np.concatenate([o[0] for o in out])
    X = np.concatenate([o[1] for o in out])
    failed = np.concatenate([o[2] for o in out])
    return np.array(ks) * dt, Y, X, failed


@dataclass(frozen=True)
class MomentEstimate:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    n_paths: int


def _pth_moment(samples, p):
    samples = np.asarray(samples, dtype=float)
    m = np.mean(samples**p)
    est = m ** (1.0 / p)
    se = np.std(samples**p, ddof=1) / math.sqrt(len(samples)) * est ** (1.0 - p) / p if est > 0 else 0.0
    return MomentEstimate(float(est), float(se), float(est - 1.96 * se), float(est + 1.96 * se), len(samples))


def regularity_diagnostics(X, eig, gamma, p=2.0):
    """``(E[sup_k ||(I-L) X_k||_{H^gamma}^p])^(1/p)`` from trajectories of shape (paths, times, modes)."""
    X = np.asarray(X, dtype=float)
    sup = np.sqrt(_sobolev_sq(X, eig.lambdas, gamma)).max(axis=1)
    return _pth_moment(sup, p)


def regularity_stability(coarse, fine):
    """Ratio of the estimates at resolution N and 2N; close to 1 when the moment is resolved."""
    return fine.estimate / coarse.estimate


@dataclass(frozen=True)
class HolderEstimate:
    slope: float
    slope_over_p: float
    gaps: tuple
    moments: tuple
    r2: float
    degenerate: bool = False


def holder_diagnostics(X, times, p=2.0, anchor=-1, exclude_mean=False, min_gaps=3):
    """Regress log E||X(t) - X(s)||^p on log(t - s), ``t = times[anchor]``, ``s`` over earlier times.

    Returns the slope and slope / p (the temporal Hölder exponent estimate).
    """
    X = np.asarray(X, dtype=float)
    times = np.asarray(times, dtype=float)
    ia = anchor % len(times)
    t = times[ia]
    gaps, moms = [], []
    for i, s in enumerate(times):
        h = t - s
        if h <= 0:
            continue
        D = X[:, ia] - X[:, i]
        if exclude_mean:
            D = D[:, 1:]
        moms.append(float(np.mean(np.sqrt(np.sum(D**2, axis=-1)) ** p)))
        gaps.append(float(h))
    if len(gaps) < min_gaps or min(moms) <= 0:
        return HolderEstimate(float("nan"), float("nan"), tuple(gaps), tuple(moms), float("nan"), True)
    fit = fit_rate(gaps, moms)
    return HolderEstimate(fit.order, fit.order / p, tuple(gaps), tuple(moms), fit.r2)


def mass_invariant_check(trajectory):
    """max_k |<Y_k, e_0> - <Y_0, e_0>|; accepts states or an array (times, modes)."""
    if isinstance(trajectory, (list, tuple)) and trajectory and hasattr(trajectory[0], "Y"):
        means = np.array([s.Y.mean for s in trajectory])
    else:
        means = np.asarray(trajectory, dtype=float)[..., 0]
    return float(np.max(np.abs(means - means[..., :1])))
