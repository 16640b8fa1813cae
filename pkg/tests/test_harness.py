import json
import math

import numpy as np
import pytest

from chspde import harness
from chspde.exceptions import ParameterError, StudyAborted
from chspde.harness import (
    Resolution,
    StudyPlan,
    fit_rate,
    holder_diagnostics,
    linear_tail_variance,
    mass_invariant_check,
    regularity_diagnostics,
    regularity_stability,
    simulate_paths,
    strong_error_study,
)
from chspde.model import double_well, make_potential, zero_potential
from chspde.noise import make_noise_spec
from chspde.spectral import SpectralField, build_eigensystem

WHITE = make_noise_spec("white", {}, 1.4)
NONE = make_noise_spec("zero", {}, 1.0)


# -- rate fits ------------------------------------------------------------------------------


def test_fit_exact_power():
    h = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    fit = fit_rate(h, h**0.75)
    assert fit.order == pytest.approx(0.75, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    fit = fit_rate(h, 2 * h)
    assert fit.order == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(2), abs=1e-12)
    assert fit.ci_low <= fit.order <= fit.ci_high


def test_fit_noisy_power():
    h = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    rng = np.random.default_rng(0)
    orders = np.array([fit_rate(h, h**0.75 * (1 + rng.uniform(-0.05, 0.05, 4))).order for _ in range(1000)])
    assert np.mean((orders >= 0.65) & (orders <= 0.85)) >= 0.99


def test_fit_weights_and_bootstrap():
    h = np.array([1 / 8, 1 / 16, 1 / 32, 1 / 64])
    rng = np.random.default_rng(1)
    samples = np.abs(rng.normal(size=(300, 1))) * h**0.75 * (1 + 0.1 * rng.normal(size=(300, 4)))
    est = np.sqrt(np.mean(samples**2, axis=0))
    fit = fit_rate(h, est, weights=[1, 2, 3, 4], samples=samples, n_boot=500, seed=3)
    assert fit.ci_low < fit.order < fit.ci_high
    assert fit.ci_width < 0.2
    again = fit_rate(h, est, weights=[1, 2, 3, 4], samples=samples, n_boot=500, seed=3)
    assert (again.ci_low, again.ci_high) == (fit.ci_low, fit.ci_high)


def test_fit_degenerate_and_invalid():
    h = [0.5, 0.25, 0.125]
    fit = fit_rate(h, [1e-3, 0.0, 1e-4])
    assert fit.degenerate and fit.reason == "below noise floor" and math.isnan(fit.order)
    with pytest.raises(ParameterError):
        fit_rate([0.5, 0.25], [1.0, 0.5])
    with pytest.raises(ParameterError):
        fit_rate([0.5, -0.25, 0.1], [1.0, 0.5, 0.1])


# -- plans ----------------------------------------------------------------------------------


def plan_kw(**kw):
    base = dict(potential=double_well(), noise=WHITE, T=0.25, n_paths=8, n_boot=50)
    base.update(kw)
    return base


@pytest.mark.parametrize(
    "make",
    [
        lambda: StudyPlan.spatial([4, 8, 16], 16, 1 / 64, **plan_kw()),
        lambda: StudyPlan.spatial([4, 8, 32], 16, 1 / 64, **plan_kw()),
        lambda: StudyPlan.temporal([1 / 8, 1 / 16], 1 / 24, 8, **plan_kw()),
        lambda: StudyPlan.temporal([1 / 8, 1 / 16], 1 / 64, 8, **plan_kw(T=0.3)),
        lambda: StudyPlan.spatial([4, 8], 16, 1 / 64, **plan_kw(norms=("H", "L4"))),
        lambda: StudyPlan.spatial([4, 8], 16, 1.0, **plan_kw(T=1.0)),
        lambda: StudyPlan.spatial([4, 8], 16, 0.6, **plan_kw(potential=make_potential(c2=-1.5), T=0.6)),
        lambda: StudyPlan.spatial([4, 8], 1024, 1 / 64, **plan_kw(d=2, noise=make_noise_spec("power_law",
                                                                                         {"r": 2}, 2.0, d=2))),
    ],
)
def test_invalid_plans(make):
    with pytest.raises(ParameterError):
        make().validate()


def test_scale_is_inverse_eigenvalue_or_step():
    sp = StudyPlan.spatial([4, 8], 16, 1 / 64, **plan_kw())
    assert sp.scale(Resolution(8, 1 / 64)) == pytest.approx(1 / 64)
    tp = StudyPlan.temporal([1 / 8, 1 / 16], 1 / 64, 8, **plan_kw())
    assert tp.scale(Resolution(8, 1 / 16)) == 1 / 16


# -- studies ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def linear_spatial():
    plan = StudyPlan.spatial([4, 8, 16, 32], 128, 1 / 64, **plan_kw(potential=zero_potential(), T=0.5,
                                                                       n_paths=64, n_boot=200))
    return strong_error_study(plan)


def test_linear_spatial_error_is_tail(linear_spatial):
    rep = linear_spatial
    eig_ref = build_eigensystem(math.pi, 1, 128)
    H = rep.norms.index("H")
    for r, res in enumerate(rep.rungs):
        target = math.sqrt(linear_tail_variance(eig_ref, res.N, WHITE, 0.5))
        assert abs(rep.estimates[r, H] - target) <= 4 * rep.stderr[r, H]
    assert abs(rep.order("H") - 0.7) <= 0.1
    # tail sums shrink along the ladder on every path
    assert np.all(np.diff(rep.raw[:, :, H], axis=1) < 0)


def test_interpolation_consistency(linear_spatial):
    rep = linear_spatial
    g = rep.plan.gamma
    n = {k: rep.norms.index(k) for k in rep.norms}
    lhs = rep.raw[..., n["H"]]
    rhs = rep.raw[..., n["H-1"]] ** (g / (1 + g)) * rep.raw[..., n["Hgamma"]] ** (1 / (1 + g))
    assert np.all(lhs <= rhs * (1 + 1e-10))


def test_report_outputs(linear_spatial):
    rep = linear_spatial
    rows = rep.csv_rows()
    assert len(rows) == 64 * 4 * 3
    assert rows[0][:4] == (0, 4, 1 / 64, "H")
    data = rep.plot_data("H")
    assert data.shape == (4, 2)
    np.testing.assert_allclose(data[:, 0], np.log10([16, 64, 256, 1024]))
    json.dumps(rep.summary(), default=float)
    assert rep.metadata["failed_paths"] == [] and rep.metadata["max_residual"] == 0.0
    assert np.all(rep.ci_low <= rep.estimates) and np.all(rep.estimates <= rep.ci_high)


def test_linear_temporal_errors_vanish():
    eig = build_eigensystem(math.pi, 1, 16)
    plan = StudyPlan.temporal([1 / 8, 1 / 16, 1 / 32], 1 / 128, 16,
                              **plan_kw(potential=zero_potential(), X0=SpectralField.zeros(eig)))
    rep = strong_error_study(plan)
    assert np.all(rep.raw == 0)
    for fit in rep.fits.values():
        assert fit.degenerate and fit.reason == "below noise floor"


def test_threads_do_not_change_raw_errors():
    plan = StudyPlan.temporal([1 / 16, 1 / 32, 1 / 64], 1 / 256, 16, **plan_kw(n_paths=20, chunk_size=3))
    a = strong_error_study(plan, threads=1)
    b = strong_error_study(plan, threads=4)
    assert a.raw.tobytes() == b.raw.tobytes()
    assert a.fits == b.fits


def test_failed_paths_excluded(monkeypatch):
    real = harness.run_batch

    def flaky(stepper, Y0, Z, sub, stride, K, record):
        run = real(stepper, Y0, Z, sub, stride, K, record)
        if stepper.cfg.dt == 1 / 16 and float(Z[0, 1, 1]) == first[0]:
            run.failed[0] = True
        return run

    plan = StudyPlan.temporal([1 / 16, 1 / 32, 1 / 64], 1 / 128, 8, **plan_kw(n_paths=40))
    first = [float(harness._tracks(plan.seed, [0], plan.eig_max, plan.T, plan.dt_fine, WHITE)[0, 1, 1])]
    monkeypatch.setattr(harness, "run_batch", flaky)
    rep = strong_error_study(plan)
    assert rep.metadata["failed_paths"] == [0]
    assert not rep.path_ok[0] and rep.path_ok[1:].all()
    assert len(rep.csv_rows()) == 39 * 3 * 3


def test_too_many_failures_abort():
    plan = StudyPlan.temporal([1 / 16, 1 / 32, 1 / 64], 1 / 128, 8,
                              **plan_kw(solver="fixed_point", max_iters=1, tol_residual=1e-15))
    with pytest.raises(StudyAborted) as exc:
        strong_error_study(plan)
    assert len(exc.value.failed_paths) == 8


def test_two_dimensional_trace_class_study():
    noise = make_noise_spec("power_law", {"r": 2}, 2.5, d=2)
    plan = StudyPlan.spatial([2, 4, 8], 16, 1 / 128, **plan_kw(noise=noise, d=2, L=1.0, n_paths=6))
    rep = strong_error_study(plan)
    assert rep.raw.shape == (6, 3, 3)
    assert np.all(np.diff(rep.estimate("H")) < 0)


# -- diagnostics -------------------------------------------------------------------------------------


def test_deterministic_regularity_resolution_stable():
    ests = []
    for N in (16, 32):
        eig = build_eigensystem(math.pi, 1, N)
        _, _, X, _ = simulate_paths(double_well(), NONE, N, 1 / 256, 0.25, 2, seed=1)
        ests.append(regularity_diagnostics(X, eig, 1.4))
    assert abs(regularity_stability(*ests) - 1) < 0.01


def test_regularity_threshold_between_gammas():
    Ns = (32, 64, 128)
    est = {1.4: [], 1.6: []}
    for N in Ns:
        eig = build_eigensystem(math.pi, 1, N)
        X0 = SpectralField.zeros(eig)
        _, _, X, _ = simulate_paths(zero_potential(), WHITE, N, 1 / 8, 0.5, 100, seed=2, X0=X0)
        for g in est:
            est[g].append(regularity_diagnostics(X, eig, g).estimate)
    inc14, inc16 = np.diff(est[1.4]), np.diff(est[1.6])
    assert inc14[1] < inc14[0]
    assert inc16[1] > inc16[0]


def test_moment_monotone_in_p():
    eig = build_eigensystem(math.pi, 1, 16)
    _, _, X, _ = simulate_paths(double_well(), WHITE, 16, 1 / 64, 0.25, 40, seed=3)
    assert regularity_diagnostics(X, eig, 1.0, p=2).estimate <= regularity_diagnostics(X, eig, 1.0, p=4).estimate


def test_holder_smooth_deterministic_flow():
    times, _, X, _ = simulate_paths(double_well(), NONE, 16, 1 / 1024, 0.5, 1, seed=0)
    idx = [len(times) - 1 - 2**i for i in range(2, 8)] + [len(times) - 1]
    est = holder_diagnostics(X[:, idx], times[idx])
    assert est.slope_over_p >= 0.5
    assert len(est.gaps) == 6


def test_holder_gap_handling():
    times = np.array([0.0, 0.25, 0.5, 0.5])
    X = np.random.default_rng(0).normal(size=(5, 4, 3))
    est = holder_diagnostics(X, times)
    assert est.gaps == (0.5, 0.25)
    assert est.degenerate


def test_mass_check():
    eig = build_eigensystem(math.pi, 1, 16)
    X0 = SpectralField.basis(eig, 0, 0.3) + SpectralField.basis(eig, 2, 0.4)
    _, Y, _, _ = simulate_paths(zero_potential(), WHITE, 16, 1 / 64, 0.25, 2, seed=0, X0=X0)
    assert mass_invariant_check(Y[0]) == 0.0
    _, Y, _, _ = simulate_paths(double_well(), WHITE, 16, 1 / 64, 0.25, 2, seed=0, X0=X0)
    assert mass_invariant_check(Y[1]) <= 1e-12
    bad = Y[1].copy()
    bad[7, 0] += 1e-6
    assert mass_invariant_check(bad) == pytest.approx(1e-6)
