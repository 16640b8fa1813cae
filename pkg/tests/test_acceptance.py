"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line (repeated in the terminal summary).

The three rate studies take a few minutes in total; run only this file with
``pytest tests/test_acceptance.py -v``.
"""

import dataclasses
import math

import numpy as np
import pytest

from chspde.cli import main
from chspde.config import load_config
from chspde.harness import holder_diagnostics, linear_tail_variance, mass_invariant_check, simulate_paths
from chspde.harness import strong_error_study
from chspde.model import double_well, make_potential, nemytskii_PN_f, one_sided_check, zero_potential
from chspde.noise import build_convolution, make_noise_spec, sample_path_bundle
from chspde.spectral import SpectralField, _sobolev_sq, build_eigensystem, lp_norm, to_physical
from chspde.stepper import SolverConfig, run_trajectory
from oracles import brute_force_PN_f

pytestmark = pytest.mark.slow

WHITE = make_noise_spec("white", {}, 1.4)


def study(name, **changes):
    plan = load_config(name).study_plan()
    if changes:
        plan = dataclasses.replace(plan, **changes)
    return plan, strong_error_study(plan)


@pytest.fixture(scope="session")
def spatial_white():
    return study("white_noise_spatial")


def test_spatial_rate_white_noise(spatial_white, verdict):
    plan, rep = spatial_white
    assert [r.N for r in plan.rungs] == [8, 16, 32, 64] and plan.reference.N == 256
    assert plan.reference.dt == 2**-11 and plan.n_paths == 200 and plan.T == 0.5 and plan.p == 2
    fit = rep.fits["H"]
    ok = 0.55 <= fit.order <= 0.90 and fit.ci_width <= 0.25
    verdict(1, "spatial rate, white noise", ok,
            f"H order {fit.order:.3f} in [0.55, 0.90], CI [{fit.ci_low:.3f}, {fit.ci_high:.3f}] "
            f"width {fit.ci_width:.3f} <= 0.25")


def test_temporal_rate_white_noise(verdict):
    plan, rep = study("white_noise_temporal")
    assert [r.dt for r in plan.rungs] == [2**-6, 2**-7, 2**-8, 2**-9] and plan.reference.dt == 2**-13
    assert plan.reference.N == 64 and plan.n_paths == 200
    fit = rep.fits["H"]
    verdict(2, "temporal rate, white noise", 0.55 <= fit.order <= 0.95,
            f"H order {fit.order:.3f} in [0.55, 0.95], CI [{fit.ci_low:.3f}, {fit.ci_high:.3f}]")


def test_temporal_rate_trace_class(verdict):
    plan, rep = study("trace_class_temporal")
    assert plan.noise.kind == "power_law" and plan.noise.r == 3 and plan.gamma == 4
    assert [r.dt for r in plan.rungs] == [2**-6, 2**-7, 2**-8, 2**-9] and plan.reference.dt == 2**-13
    fit = rep.fits["H"]
    verdict(3, "temporal rate, trace-class noise", 0.8 <= fit.order <= 1.2,
            f"H order {fit.order:.3f} in [0.8, 1.2], CI [{fit.ci_low:.3f}, {fit.ci_high:.3f}]")


def test_negative_norm_superconvergence(spatial_white, verdict):
    _, rep = spatial_white
    h, hm1 = rep.order("H"), rep.order("H-1")
    verdict(4, "H-1 spatial superconvergence", hm1 >= h + 0.3,
            f"H-1 order {hm1:.3f} - H order {h:.3f} = {hm1 - h:.3f} >= 0.3")


def test_linear_oracle(verdict):
    L, N, dt, T = math.pi, 64, 2**-11, 0.5
    eig = build_eigensystem(L, 1, N)
    X0 = SpectralField(np.random.default_rng(1).normal(size=eig.n_modes) / (1 + eig.lambdas), eig)
    track = build_convolution(sample_path_bundle(3, 0, eig, T, dt), WHITE)
    states = run_trajectory(X0, track, SolverConfig(dt=dt, K=int(T / dt), N=N), zero_potential())
    traj_err = max(np.max(np.abs(s.X.coeffs - ((1 + eig.lambdas**2 * dt) ** (-s.k) * X0.coeffs + track.Z[s.k])))
                   for s in states)

    plan, rep = study("white_noise_spatial", potential=zero_potential())
    eig_ref = build_eigensystem(L, 1, plan.reference.N)
    H = rep.norms.index("H")
    devs = []
    for r, res in enumerate(rep.rungs):
        target = math.sqrt(linear_tail_variance(eig_ref, res.N, plan.noise, plan.T))
        devs.append(abs(rep.estimates[r, H] - target) / rep.stderr[r, H])
    ok = traj_err <= 1e-10 and max(devs) <= 4
    verdict(5, "linear-case oracle", ok,
            f"closed-form deviation {traj_err:.2e} <= 1e-10, tail-sum deviation {max(devs):.2f} sigma <= 4")


def test_structural_invariants(verdict):
    rng = np.random.default_rng(2024)
    checks = {}

    _, Y, _, _ = simulate_paths(double_well(), WHITE, 64, 2**-11, 0.5, 4, seed=5)
    checks["mass drift"] = (max(mass_invariant_check(y) for y in Y), 1e-12)

    eig = build_eigensystem(math.pi, 1, 64)
    c = rng.standard_normal((10_000, eig.n_modes)) * rng.random((10_000, eig.n_modes)) ** 4
    c[:, 0] = 0.0
    g = rng.uniform(0.1, 4.0, (10_000, 1))
    lhs = np.sqrt(np.sum(c**2, axis=1))
    hm1 = np.sqrt(_sobolev_sq(c, eig.lambdas, -1.0))
    hg = np.array([math.sqrt(_sobolev_sq(ci, eig.lambdas, gi)) for ci, gi in zip(c, g[:, 0])])
    rhs = hm1 ** (g[:, 0] / (1 + g[:, 0])) * hg ** (1 / (1 + g[:, 0]))
    checks["interpolation excess"] = (max(0.0, float(np.max((lhs - rhs) / rhs))), 1e-10)

    worst = 0.0
    for pot in (double_well(), make_potential(0.3, 1.0, -2.0, 3.0, 0.5), make_potential(c2=1.0, c4=2.0)):
        a, b = rng.uniform(-10, 10, (2, 100_000))
        worst = min(worst, float(one_sided_check(pot, a, b).min()))
    checks["one-sided deficit"] = (0.0 - worst, 1e-9)

    dev = 0.0
    for N in (4, 16, 32):
        e = build_eigensystem(1.3, 1, N)
        pot = make_potential(*rng.normal(size=4), c4=0.3)
        v = SpectralField(rng.normal(size=e.n_modes) / np.arange(1, e.n_modes + 1), e)
        dev = max(dev, float(np.max(np.abs(nemytskii_PN_f(v, pot).coeffs - brute_force_PN_f(v.coeffs, 1.3, 1, N, pot)))))
    checks["dealiasing deviation"] = (dev, 1e-10)

    e2 = build_eigensystem(math.pi, 1, 2)
    T, n = 8.0, 10_000
    Z = np.array([build_convolution(sample_path_bundle(7, i, e2, T, 1 / 8), WHITE).Z[-1] for i in range(n)])
    lam = e2.lambdas[1:]
    target = -np.expm1(-2 * lam**2 * T) / (2 * lam**2)
    sig = np.max(np.abs(Z[:, 1:].var(axis=0) - target) / (target * math.sqrt(2.0 / n)))
    checks["OU variance sigmas"] = (float(sig), 4.0)

    pdev = 0.0
    for N in (4, 64, 256):
        e = build_eigensystem(math.pi, 1, N)
        v = SpectralField(rng.standard_normal(e.n_modes), e)
        pdev = max(pdev, abs(lp_norm(to_physical(v, 2 * N), 2, math.pi) - v.norm()) / v.norm())
    checks["Parseval deviation"] = (pdev, 1e-10)

    ok = all(val <= tol for val, tol in checks.values())
    verdict(6, "structural invariants", ok, ", ".join(f"{k} {v:.2e} <= {t:g}" for k, (v, t) in checks.items()))


def test_holder_exponent(verdict):
    dt, T = 2.0**-14, 0.25
    K = int(T / dt)
    record = [K - 2**i for i in range(7)] + [K]
    eig = build_eigensystem(math.pi, 1, 64)
    times, _, Z, _ = simulate_paths(zero_potential(), WHITE, 64, dt, T, 500, seed=11, record=record,
                                    X0=SpectralField.zeros(eig))
    z = holder_diagnostics(Z, times)
    times, _, X, failed = simulate_paths(double_well(), WHITE, 64, dt, T, 500, seed=11, record=record)
    x = holder_diagnostics(X[~failed], times)
    target = 1.4 / 4
    ok = abs(z.slope_over_p - target) <= 0.05 and abs(x.slope_over_p - target) <= 0.1
    verdict(7, "Hölder exponent diagnostic", ok,
            f"Z-only slope/p {z.slope_over_p:.3f} = {target} +- 0.05, nonlinear slope/p {x.slope_over_p:.3f} "
            f"in [{target - 0.1:.2f}, {target + 0.1:.2f}] over gaps 2^-8..2^-14")


def test_thread_reproducibility(tmp_path, verdict):
    common = ["study", "--config", "white_noise_temporal", "--paths", "40", "--format", "csv"]
    assert main(common + ["--threads", "1", "--out", str(tmp_path / "t1")]) == 0
    assert main(common + ["--threads", "8", "--out", str(tmp_path / "t8")]) == 0
    a, b = (tmp_path / "t1" / "errors.csv").read_bytes(), (tmp_path / "t8" / "errors.csv").read_bytes()
    verdict(8, "thread reproducibility", a == b, f"errors.csv identical for 1 and 8 threads ({len(a)} bytes)")
