"""Quartic potential F, its derivative f = F', the projected Nemytskii map P^N f and the energy J."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError, UndersamplingError
from .spectral import SpectralField, _outer, _sobolev_sq, analyze, synthesize, trapezoid_weights

__all__ = [
    "Potential",
    "EnergyValue",
    "make_potential",
    "double_well",
    "zero_potential",
    "nemytskii_PN_f",
    "project_f",
    "energy",
    "one_sided_check",
    "default_grid",
]


@dataclass(frozen=True)
class Potential:
    """F(x) = c4 x^4 + c3 x^3 + c2 x^2 + c1 x + c0."""

    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    c4: float = 0.0

    @property
    def coefficients(self):
        return (self.c0, self.c1, self.c2, self.c3, self.c4)

    @property
    def f_coefficients(self):
        """(a3, a2, a1, a0) of f(x) = a3 x^3 + a2 x^2 + a1 x + a0."""
        return (4 * self.c4, 3 * self.c3, 2 * self.c2, self.c1)

    @property
    def is_zero_force(self):
        return self.c1 == self.c2 == self.c3 == self.c4 == 0

    @property
    def L_f(self):
        """One-sided Lipschitz constant max(0, -min f')."""
        if self.c4 > 0:
            return max(0.0, 3 * self.c3**2 / (4 * self.c4) - 2 * self.c2)
        if self.c3 != 0:
            return math.inf
        return max(0.0, -2 * self.c2)

    def F(self, x):
        return (((self.c4 * x + self.c3) * x + self.c2) * x + self.c1) * x + self.c0

    def f(self, x):
        return ((4 * self.c4 * x + 3 * self.c3) * x + 2 * self.c2) * x + self.c1

    def fprime(self, x):
        return (12 * self.c4 * x + 6 * self.c3) * x + 2 * self.c2


def make_potential(c0=0.0, c1=0.0, c2=0.0, c3=0.0, c4=0.25, allow_degenerate=False):
    """Quartic potential; ``c4 > 0`` unless ``allow_degenerate`` (linear-test hook)."""
    cs = [float(c) for c in (c0, c1, c2, c3, c4)]
    if not all(math.isfinite(c) for c in cs):
        raise ParameterError("potential coefficients must be finite")
    if not allow_degenerate and not cs[4] > 0:
        raise ParameterError(f"c4 must be > 0, got {c4}")
    if allow_degenerate and (cs[4] < 0 or (cs[4] == 0 and cs[3] != 0)):
        raise ParameterError("degenerate potential must have c4 >= 0 and, when c4 = 0, c3 = 0")
    return Potential(*cs)


def double_well():
    """F = (x^2 - 1)^2 / 4, f = x^3 - x."""
    return make_potential(c0=0.25, c2=-0.5, c4=0.25)


def zero_potential():
    """f = 0: the linear stochastic Cahn-Hilliard equation (test hook)."""
    return make_potential(0, 0, 0, 0, 0, allow_degenerate=True)


def default_grid(N):
    return 4 * N


def _check_dealias(N, M, exact_at):
    if M < 2 * N:
        raise UndersamplingError(f"grid of {M} nodes aliases the projection of a cubic on {N} modes; need M >= {2 * N}")
    if M < exact_at:
        warnings.warn(
            f"M={M} < {exact_at}: the top frequency of the product aliases onto the mean; projection not exact",
            stacklevel=3,
        )


def project_f(coeffs, eig, pot, M):
    """Batched P^N f(u) for coefficient arrays ``(..., n_modes)``; no validation."""
    if pot.is_zero_force:
        return np.zeros_like(coeffs)
    u = synthesize(coeffs, eig, M)
    return analyze(pot.f(u), eig)


def nemytskii_PN_f(v, pot, M=None):
    """P^N f(v), computed exactly by cubic-safe collocation on ``M`` cosine nodes per axis."""
    N = v.eig.N
    M = default_grid(N) if M is None else int(M)
    _check_dealias(N, M, 2 * N + 2)
    return SpectralField(project_f(v.coeffs, v.eig, pot, M), v.eig)


@dataclass(frozen=True)
class EnergyValue:
    dirichlet: float
    potential: float

    @property
    def total(self):
        return self.dirichlet + self.potential


def energy(v, pot, M=None):
    """J(v) = 1/2 ||grad v||^2 + int F(v) dx, with the quartic integral by exact quadrature."""
    eig = v.eig
    M = default_grid(eig.N) if M is None else int(M)
    if M < 2 * eig.N + 2:
        raise UndersamplingError(f"energy quadrature needs M >= {2 * eig.N + 2}, got {M}")
    dirichlet = 0.5 * float(_sobolev_sq(v.coeffs, eig.lambdas, 1.0))
    u = synthesize(v.coeffs, eig, M)
    w = _outer(trapezoid_weights(eig.L, M), eig.d)
    return EnergyValue(dirichlet, float(np.sum(w * pot.F(u))))


def one_sided_check(pot, a, b):
    """(f(a) - f(b))(a - b) + L_f (a - b)^2; nonnegative by definition of L_f."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a - b
    return (pot.f(a) - pot.f(b)) * diff + pot.L_f * diff**2
