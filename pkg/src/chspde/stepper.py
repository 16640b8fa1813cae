"""Accelerated implicit Euler scheme for the spectral Galerkin system.

Only Y = X - Z is stepped implicitly:

    Y_{k+1} = T_dt Y_k - dt T_dt A P^N f(Y_{k+1} + Z(t_{k+1})),   T_dt = (I + dt A^2)^{-1},

while Z(t_{k+1}) is read from an exactly sampled :class:`~chspde.noise.ConvolutionTrack`.
All kernels work on batches of coefficient vectors ``(B, n_modes)`` so that many
Monte Carlo paths advance together; every row is updated independently of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .exceptions import ParameterError, SolverError, StepFailure, StepsizeError
from .model import default_grid, energy, project_f
from .spectral import SpectralField, analyze, build_eigensystem, synthesize

__all__ = [
    "SolverConfig",
    "StepsizeReport",
    "SchemeState",
    "ImplicitEulerStepper",
    "validate_stepsize",
    "step_full",
    "solve_implicit",
    "run_trajectory",
    "energy_trace",
    "SOLVERS",
]

SOLVERS = ("fixed_point", "newton", "newton_with_fp_fallback", "fixed_point_with_newton_fallback")
DENSE_JACOBIAN_LIMIT = 1024
DIVERGENCE_WINDOW = 5


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    K: int
    N: int
    solver: str = "newton_with_fp_fallback"
    tol_residual: float = 1e-11
    max_iters: int = 50
    M: int | None = None
    override_stepsize_guard: bool = False

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if self.K < 0:
            raise ParameterError(f"K must be >= 0, got {self.K}")
        if self.N < 1:
            raise ParameterError(f"N must be >= 1, got {self.N}")
        if self.solver not in SOLVERS:
            raise ParameterError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not self.tol_residual > 0 or self.max_iters < 1:
            raise ParameterError("tol_residual must be > 0 and max_iters >= 1")
        if self.M is not None and self.M < 2 * self.N:
            raise ParameterError(f"collocation grid M={self.M} < 2N={2 * self.N}")

    @property
    def T(self):
        return self.K * self.dt

    @property
    def grid(self):
        return self.M or default_grid(self.N)


@dataclass(frozen=True)
class StepsizeReport:
    ok: bool
    dt: float
    bound: float
    L_f: float
    lambda_1: float

    def __bool__(self):
        return self.ok

    @property
    def message(self):
        rel = "<" if self.ok else ">="
        return (f"dt={self.dt:g} {rel} min(1, 1/((L_f - lambda_1) v 0)) = {self.bound:g} "
                f"(L_f={self.L_f:g}, lambda_1={self.lambda_1:g})")


def validate_stepsize(dt, pot, eig):
    """Solvability restriction dt < min(1, 1/((L_f - lambda_1) v 0)), with 1/0 = inf."""
    excess = max(pot.L_f - eig.lambda_1, 0.0)
    bound = min(1.0, math.inf if excess == 0 else 1.0 / excess)
    return StepsizeReport(dt < bound, float(dt), float(bound), float(pot.L_f), eig.lambda_1)


@dataclass(frozen=True)
class SchemeState:
    k: int
    t: float
    Y: SpectralField
    Z: SpectralField

    @property
    def X(self):
        return self.Y + self.Z


@dataclass
class SolveInfo:
    residual: np.ndarray
    iterations: np.ndarray
    failed: np.ndarray
    method: list = field(default_factory=list)


class ImplicitEulerStepper:
    """Batched implicit solves for one (eigensystem, potential, config) triple."""

    def __init__(self, eig, pot, cfg):
        if eig.N != cfg.N:
            raise ParameterError(f"eigensystem cutoff {eig.N} != config cutoff {cfg.N}")
        report = validate_stepsize(cfg.dt, pot, eig)
        if not report.ok and not cfg.override_stepsize_guard:
            raise StepsizeError("stepsize rule violated: " + report.message, cfg.dt, report.bound)
        self.eig, self.pot, self.cfg = eig, pot, cfg
        self.M = cfg.grid
        lam = eig.lambdas
        self.resolvent = 1.0 / (1.0 + cfg.dt * lam**2)
        self.gain = cfg.dt * lam * self.resolvent
        self._basis_grid = None

    # -- residual and Jacobian ------------------------------------------------
    def force(self, Y, Z):
        return project_f(Y + Z, self.eig, self.pot, self.M)

    def residual(self, Y, rhs, Z):
        """G(Y) = Y - rhs + dt T_dt A P^N f(Y + Z)."""
        return Y - rhs + self.gain * self.force(Y, Z)

    def _basis(self):
        if self._basis_grid is None:
            self._basis_grid = synthesize(np.eye(self.eig.n_modes), self.eig, self.M)
        return self._basis_grid

    def jacobian(self, Y, Z):
        """Dense I + dt T_dt A P^N f'(Y+Z) P^N for each row, shape (B, n, n)."""
        d = self.eig.d
        fp = self.pot.fprime(synthesize(Y + Z, self.eig, self.M))
        E = self._basis()
        n = self.eig.n_modes
        J = np.empty((len(Y), n, n))
        for b in range(len(Y)):
            J[b] = analyze(E * fp[b][(None,) + (slice(None),) * d], self.eig)
        J *= self.gain[None, :, None]
        J[:, np.arange(n), np.arange(n)] += 1.0
        return J

    # -- solvers ----------------------------------------------------------------
    def fixed_point(self, rhs, Z, Y0=None):
        """Y <- rhs - dt T_dt A P^N f(Y + Z), per row until the residual meets the tolerance."""
        cfg = self.cfg
        B = len(rhs)
        Y = rhs.copy() if Y0 is None else Y0.copy()
        res = np.full(B, np.inf)
        iters = np.zeros(B, dtype=int)
        failed = np.zeros(B, dtype=bool)
        growth = np.zeros(B, dtype=int)
        active = np.arange(B)
        for it in range(cfg.max_iters + 1):
            if active.size == 0:
                break
            Ya = Y[active]
            Ynew = rhs[active] - self.gain * self.force(Ya, Z[active])
            r = np.linalg.norm(Ya - Ynew, axis=1)
            iters[active] = it
            growth[active] = np.where(r > res[active], growth[active] + 1, 0)
            res[active] = r
            done = r <= cfg.tol_residual
            bad = ~done & ((growth[active] >= DIVERGENCE_WINDOW) | ~np.isfinite(r) | (it == cfg.max_iters))
            failed[active[bad]] = True
            keep = ~done & ~bad
            Y[active[keep]] = Ynew[keep]
            active = active[keep]
        return Y, SolveInfo(res, iters, failed, ["fixed_point"] * B)

    def newton(self, rhs, Z, Y0=None):
        """Damped Newton on G(Y) = 0; dense Jacobian up to 1024 unknowns, GMRES beyond."""
        if self.eig.n_modes > DENSE_JACOBIAN_LIMIT:
            return self._newton_krylov(rhs, Z, Y0)
        cfg = self.cfg
        B = len(rhs)
        Y = rhs.copy() if Y0 is None else Y0.copy()
        res = np.full(B, np.inf)
        iters = np.zeros(B, dtype=int)
        failed = np.zeros(B, dtype=bool)
        growth = np.zeros(B, dtype=int)
        active = np.arange(B)
        G = self.residual(Y, rhs, Z)
        r = np.linalg.norm(G, axis=1)
        for it in range(cfg.max_iters + 1):
            iters[active] = it
            growth[active] = np.where(r > res[active], growth[active] + 1, 0)
            res[active] = r
            done = r <= cfg.tol_residual
            bad = ~done & ((growth[active] >= DIVERGENCE_WINDOW) | ~np.isfinite(r) | (it == cfg.max_iters))
            failed[active[bad]] = True
            keep = ~done & ~bad
            active, G, r = active[keep], G[keep], r[keep]
            if active.size == 0:
                break
            Ya, Za, ra = Y[active], Z[active], rhs[active]
            delta = np.linalg.solve(self.jacobian(Ya, Za), -G[..., None])[..., 0]
            step = np.ones(len(active))
            trial = Ya + delta
            Gt = self.residual(trial, ra, Za)
            rt = np.linalg.norm(Gt, axis=1)
            for _ in range(10):
                shrink = ~(rt <= (1 - 1e-4 * step) * r) & (r > cfg.tol_residual)
                if not shrink.any():
                    break
                step[shrink] *= 0.5
                trial[shrink] = Ya[shrink] + step[shrink, None] * delta[shrink]
                Gt[shrink] = self.residual(trial[shrink], ra[shrink], Za[shrink])
                rt[shrink] = np.linalg.norm(Gt[shrink], axis=1)
            Y[active] = trial
            G, r = Gt, rt
        return Y, SolveInfo(res, iters, failed, ["newton"] * B)

    def _newton_krylov(self, rhs, Z, Y0=None):
        cfg = self.cfg
        B = len(rhs)
        Y = rhs.copy() if Y0 is None else Y0.copy()
        info = SolveInfo(np.full(B, np.inf), np.zeros(B, dtype=int), np.zeros(B, dtype=bool), ["newton_krylov"] * B)
        n, d = self.eig.n_modes, self.eig.d
        for b in range(B):
            y, z, c = Y[b : b + 1], Z[b : b + 1], rhs[b : b + 1]
            G = self.residual(y, c, z)[0]
            r, growth, prev = float(np.linalg.norm(G)), 0, np.inf
            for it in range(cfg.max_iters + 1):
                info.iterations[b] = it
                growth = growth + 1 if r > prev else 0
                prev = r
                if r <= cfg.tol_residual:
                    break
                if growth >= DIVERGENCE_WINDOW or not np.isfinite(r) or it == cfg.max_iters:
                    info.failed[b] = True
                    break
                fp = self.pot.fprime(synthesize(y + z, self.eig, self.M))[0]

                def matvec(v, fp=fp):
                    w = synthesize(np.asarray(v).reshape(1, n), self.eig, self.M)[0]
                    return v + self.gain * analyze((fp * w)[None], self.eig)[0]

                op = LinearOperator((n, n), matvec=matvec, dtype=float)
                delta, _ = gmres(op, -G, rtol=1e-3 * min(1.0, r), atol=0.1 * cfg.tol_residual)
                step = 1.0
                for _ in range(10):
                    trial = y + step * delta
                    Gt = self.residual(trial, c, z)[0]
                    rt = float(np.linalg.norm(Gt))
                    if rt <= (1 - 1e-4 * step) * r:
                        break
                    step *= 0.5
                y, G, r = trial, Gt, rt
            info.residual[b] = r
            Y[b] = y[0]
        return Y, info

    def solve(self, rhs, Z):
        """Apply the configured policy; failed rows are marked, not raised."""
        policy = self.cfg.solver
        first, second = {
            "fixed_point": (self.fixed_point, None),
            "newton": (self.newton, None),
            "newton_with_fp_fallback": (self.newton, self.fixed_point),
            "fixed_point_with_newton_fallback": (self.fixed_point, self.newton),
        }[policy]
        Y, info = first(rhs, Z)
        if second is not None and info.failed.any():
            idx = np.flatnonzero(info.failed)
            Yb, ib = second(rhs[idx], Z[idx])
            Y[idx] = Yb
            info.residual[idx] = ib.residual
            info.iterations[idx] += ib.iterations
            info.failed[idx] = ib.failed
            for i, m in zip(idx, ib.method):
                info.method[i] = info.method[i] + "+" + m
        return Y, info

    def step(self, Y, Z_next):
        """One step for a batch; the mean coefficient is copied, not solved for."""
        rhs = self.resolvent * Y
        Ynew, info = self.solve(rhs, Z_next)
        Ynew[:, 0] = Y[:, 0]
        return Ynew, info


def _as_stepper(eig, pot, cfg):
    return ImplicitEulerStepper(eig, pot, cfg)


def solve_implicit(rhs, Z_next, cfg, pot):
    """Solve Y = rhs - dt T_dt A P^N f(Y + Z_next) for single fields."""
    stepper = _as_stepper(rhs.eig, pot, cfg)
    Y, info = stepper.solve(rhs.coeffs[None].copy(), Z_next.coeffs[None])
    if info.failed[0]:
        raise SolverError(f"{cfg.solver} did not converge (residual {info.residual[0]:.3e})",
                          float(info.residual[0]), int(info.iterations[0]))
    return SpectralField(Y[0], rhs.eig)


def step_full(state, Z_next, cfg, pot):
    """Advance a :class:`SchemeState` by one step using Z(t_{k+1}) = ``Z_next``."""
    stepper = _as_stepper(state.Y.eig, pot, cfg)
    Y, info = stepper.step(state.Y.coeffs[None].copy(), Z_next.coeffs[None])
    if info.failed[0]:
        raise StepFailure(f"step {state.k + 1} failed (residual {info.residual[0]:.3e})",
                          state.k + 1, float(info.residual[0]), int(info.iterations[0]))
    return SchemeState(state.k + 1, state.t + cfg.dt, SpectralField(Y[0], state.Y.eig), Z_next)


def stride_for(dt, dt_fine):
    ratio = dt / dt_fine
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
        raise ParameterError(f"dt={dt} is not an integer multiple of the fine step {dt_fine}")
    return stride


@dataclass
class BatchRun:
    """Result of :func:`run_batch`: recorded Y and X per step index plus solver statistics."""

    Y: dict
    X: dict
    failed: np.ndarray
    fail_step: np.ndarray
    max_residual: np.ndarray
    iterations: np.ndarray


def run_batch(stepper, Y0, Zfine, sub, stride, K, record):
    """Advance B paths for K steps.

    ``Zfine`` is (B, K_fine + 1, n_max); ``sub`` selects the stepper's modes from n_max.
    ``record`` is a set of step indices to keep.  A path that fails is frozen and flagged.
    """
    B = len(Zfine)
    Y = np.broadcast_to(Y0, (B, stepper.eig.n_modes)).copy()
    failed = np.zeros(B, dtype=bool)
    fail_step = np.full(B, -1)
    max_res = np.zeros(B)
    iters = np.zeros(B, dtype=int)
    out_Y, out_X = {}, {}
    if 0 in record:
        out_Y[0] = Y.copy()
        out_X[0] = Y + Zfine[:, 0][:, sub]
    for k in range(K):
        Zn = Zfine[:, (k + 1) * stride][:, sub]
        alive = np.flatnonzero(~failed)
        if alive.size:
            Ynew, info = stepper.step(Y[alive], Zn[alive])
            ok = ~info.failed
            Y[alive[ok]] = Ynew[ok]
            newly = alive[info.failed]
            failed[newly] = True
            fail_step[newly] = k + 1
            max_res[alive] = np.maximum(max_res[alive], np.where(np.isfinite(info.residual), info.residual, np.inf))
            iters[alive] += info.iterations
        if k + 1 in record:
            out_Y[k + 1] = Y.copy()
            out_X[k + 1] = Y + Zn
    return BatchRun(out_Y, out_X, failed, fail_step, max_res, iters)


def _record_set(record, K):
    if record == "all":
        return set(range(K + 1))
    if record == "final":
        return {0, K}
    return {int(k) for k in record if 0 <= int(k) <= K}


def run_trajectory(X0, track, cfg, pot, record="all"):
    """States k = 0..K (thinned by ``record``: "all", "final" or an iterable of step indices).

    ``X0`` may live on any cutoff; it is projected (or zero-padded) to ``cfg.N``.
    """
    base = track.eig
    eig = build_eigensystem(base.L, base.d, cfg.N)
    if cfg.N > base.N:
        raise ParameterError(f"cutoff {cfg.N} exceeds the track's N_max={base.N}")
    stride = stride_for(cfg.dt, track.dt_fine)
    if cfg.K * stride > track.K_fine:
        raise ParameterError(f"K*dt = {cfg.T} exceeds the track horizon {track.K_fine * track.dt_fine}")
    x0 = X0.project(cfg.N) if X0.eig.N >= cfg.N else X0.embed(eig)
    stepper = ImplicitEulerStepper(eig, pot, cfg)
    sub = base.submodes(cfg.N)
    ks = sorted(_record_set(record, cfg.K))
    run = run_batch(stepper, x0.coeffs, track.Z[None], sub, stride, cfg.K, set(ks))
    if run.failed[0]:
        k = int(run.fail_step[0])
        raise StepFailure(f"trajectory failed at step {k}", k, float(run.max_residual[0]))
    states = []
    for k in ks:
        Zk = SpectralField(track.Z[k * stride, sub], eig)
        states.append(SchemeState(k, k * cfg.dt, SpectralField(run.Y[k][0], eig), Zk))
    return states


def energy_trace(states, pot, use="Y"):
    """J along a trajectory (of Y by default, the deterministic part)."""
    return np.array([energy(getattr(s, use), pot).total for s in states])
