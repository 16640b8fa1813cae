"""Neumann-Laplacian eigensystem on the box [0, L]^d and diagonal operator calculus.

Coefficient vectors are flat, with the multi-index ``(j_0, ..., j_{d-1})`` stored at
``j_0 + (N+1) j_1 + (N+1)^2 j_2`` (first axis fastest).  Internally a flat vector is
reshaped in C order, which reverses the axis order of the tensor; every axis carries
the same 1D basis, so the transforms never need to undo that reversal except when
grid values are handed back to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.fft

from .exceptions import DomainError, ParameterError, UndersamplingError

__all__ = [
    "Eigensystem",
    "SpectralField",
    "DiagonalSymbol",
    "build_eigensystem",
    "apply_diagonal",
    "sobolev_norm",
    "full_norm",
    "to_physical",
    "to_spectral",
    "grid_nodes",
    "lp_norm",
    "mean_project",
    "complement_project",
]

MAX_SOBOLEV_INDEX = 8.0


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Eigensystem:
    """Eigenpairs of the Neumann Laplacian with per-axis cutoff ``N``."""

    L: float
    d: int
    N: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ParameterError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ParameterError(f"domain length must be positive, got {self.L}")
        if self.N < 1:
            raise ParameterError(f"spectral cutoff must be >= 1, got {self.N}")

    @property
    def shape(self):
        return (self.N + 1,) * self.d

    @property
    def n_modes(self):
        return (self.N + 1) ** self.d

    @property
    def volume(self):
        return self.L ** self.d

    @cached_property
    def axis_eigenvalues(self):
        return _readonly((np.arange(self.N + 1) * np.pi / self.L) ** 2)

    @cached_property
    def mode_index(self):
        """Multi-index of every flat mode, shape ``(n_modes, d)``."""
        flat = np.arange(self.n_modes)
        idx = np.stack([(flat // (self.N + 1) ** a) % (self.N + 1) for a in range(self.d)], axis=1)
        idx.setflags(write=False)
        return idx

    @cached_property
    def lambdas(self):
        return _readonly(self.axis_eigenvalues[self.mode_index].sum(axis=1))

    @property
    def lambda_1(self):
        return float(self.axis_eigenvalues[1])

    @property
    def lambda_N(self):
        return float(self.axis_eigenvalues[self.N])

    def submodes(self, N):
        """Flat positions (in this system) of the modes with ``|j|_inf <= N``, in the order of the smaller system."""
        if N > self.N:
            raise ParameterError(f"cutoff {N} exceeds eigensystem cutoff {self.N}")
        small = Eigensystem(self.L, self.d, N).mode_index
        pos = np.zeros(len(small), dtype=np.intp)
        for a in range(self.d):
            pos += small[:, a] * (self.N + 1) ** a
        return pos

    def eigenfunction(self, j, x):
        """Evaluate e_j at points ``x`` of shape ``(..., d)`` (or ``(...)`` when d == 1)."""
        j = np.atleast_1d(j)
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        out = np.ones(x.shape[:-1])
        for a in range(self.d):
            out = out * _axis_basis(int(j[a]), self.L, x[..., a])
        return out


def _axis_basis(j, L, x):
    if j == 0:
        return np.full_like(x, 1.0 / math.sqrt(L))
    return math.sqrt(2.0 / L) * np.cos(j * np.pi * x / L)


@lru_cache(maxsize=64)
def build_eigensystem(L, d, N):
    """Eigensystem of the Neumann Laplacian on ``[0, L]^d`` truncated at ``|j|_inf <= N``."""
    return Eigensystem(float(L), int(d), int(N))


def _check_finite(a, what="coefficients"):
    if not np.all(np.isfinite(a)):
        raise ParameterError(f"{what} contain NaN or Inf")


class SpectralField:
    """Real coefficient vector of a function in span{e_j : |j|_inf <= N}."""

    __slots__ = ("coeffs", "eig")

    def __init__(self, coeffs, eig):
        c = np.array(coeffs, dtype=float).reshape(-1)
        if c.shape != (eig.n_modes,):
            raise ParameterError(f"expected {eig.n_modes} coefficients, got {c.size}")
        _check_finite(c)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "eig", eig)

    def __setattr__(self, name, value):
        raise AttributeError("SpectralField is immutable")

    @classmethod
    def zeros(cls, eig):
        return cls(np.zeros(eig.n_modes), eig)

    @classmethod
    def basis(cls, eig, j, scale=1.0):
        """``scale * e_j`` where ``j`` is an int (d == 1) or a multi-index."""
        j = np.atleast_1d(j)
        if len(j) != eig.d or np.any(j < 0) or np.any(j > eig.N):
            raise ParameterError(f"mode {tuple(j)} outside eigensystem")
        c = np.zeros(eig.n_modes)
        c[int(sum(int(j[a]) * (eig.N + 1) ** a for a in range(eig.d)))] = scale
        return cls(c, eig)

    @classmethod
    def from_function(cls, func, eig, M=None):
        """Project ``func(x_0, ..., x_{d-1})`` onto the modes by exact cosine quadrature."""
        M = M or 4 * eig.N
        axes = np.meshgrid(*([grid_nodes(eig.L, M)] * eig.d), indexing="ij")
        values = np.broadcast_to(np.asarray(func(*axes), dtype=float), axes[0].shape)
        return to_spectral(values, eig.N, eig.L)

    @property
    def mean(self):
        """Coefficient of the constant mode e_0."""
        return float(self.coeffs[0])

    @property
    def N(self):
        return self.eig.N

    def norm(self):
        return float(np.linalg.norm(self.coeffs))

    def project(self, N):
        """P^N: keep the modes with ``|j|_inf <= N``."""
        eig = build_eigensystem(self.eig.L, self.eig.d, N)
        return SpectralField(self.coeffs[self.eig.submodes(N)], eig)

    def embed(self, eig):
        """Zero-pad into a larger eigensystem over the same box."""
        if (eig.L, eig.d) != (self.eig.L, self.eig.d) or eig.N < self.eig.N:
            raise ParameterError("can only embed into a finer eigensystem over the same box")
        c = np.zeros(eig.n_modes)
        c[eig.submodes(self.eig.N)] = self.coeffs
        return SpectralField(c, eig)

    def _other(self, other):
        if not isinstance(other, SpectralField):
            return NotImplemented
        if other.eig != self.eig:
            raise ParameterError("fields live on different eigensystems")
        return other.coeffs

    def __add__(self, other):
        c = self._other(other)
        if c is NotImplemented:
            return c
        return SpectralField(self.coeffs + c, self.eig)

    def __sub__(self, other):
        c = self._other(other)
        if c is NotImplemented:
            return c
        return SpectralField(self.coeffs - c, self.eig)

    def __neg__(self):
        return SpectralField(-self.coeffs, self.eig)

    def __mul__(self, scalar):
        return SpectralField(float(scalar) * self.coeffs, self.eig)

    __rmul__ = __mul__

    def __repr__(self):
        return f"SpectralField(N={self.eig.N}, d={self.eig.d}, L={self.eig.L:g}, mean={self.mean:.6g})"


@dataclass(frozen=True, eq=False)
class DiagonalSymbol:
    """Per-mode multiplier of a function of A, tagged with how it was built."""

    eig: Eigensystem
    kind: str
    param: float
    multipliers: np.ndarray

    @classmethod
    def fractional_power(cls, eig, alpha):
        """A^alpha; for alpha < 0 the mean multiplier is 0 and only zero-mean fields are accepted."""
        lam = eig.lambdas
        m = np.zeros_like(lam)
        nz = lam > 0
        m[nz] = lam[nz] ** alpha
        if alpha == 0:
            m[0] = 1.0
        return cls(eig, "power", float(alpha), _readonly(m))

    @classmethod
    def semigroup(cls, eig, t):
        """exp(-t A^2)."""
        if t < 0:
            raise ParameterError("semigroup time must be nonnegative")
        return cls(eig, "semigroup", float(t), _readonly(np.exp(-(eig.lambdas ** 2) * t)))

    @classmethod
    def resolvent(cls, eig, dt):
        """T_dt = (I + dt A^2)^{-1}."""
        if dt < 0:
            raise ParameterError("resolvent stepsize must be nonnegative")
        return cls(eig, "resolvent", float(dt), _readonly(1.0 / (1.0 + eig.lambdas ** 2 * dt)))

    @classmethod
    def projection(cls, eig, cutoff):
        """P^cutoff expressed on the larger eigensystem."""
        m = (eig.mode_index.max(axis=1) <= cutoff).astype(float)
        return cls(eig, "projection", float(cutoff), _readonly(m))


def apply_diagonal(v, s):
    """Multiply each coefficient of ``v`` by the symbol's multiplier."""
    if s.eig != v.eig:
        raise ParameterError("symbol and field are built over different eigensystems")
    if s.kind == "power" and s.param < 0 and v.mean != 0.0:
        raise DomainError("negative power of A requested on a field with nonzero mean (lambda_0 = 0)")
    return SpectralField(s.multipliers * v.coeffs, v.eig)


def _sobolev_sq(coeffs, lambdas, alpha):
    """Sum over j != 0 of lambda_j^alpha c_j^2 along the last axis; ignores the mean."""
    w = np.zeros_like(lambdas)
    w[1:] = lambdas[1:] ** alpha
    return np.sum(w * coeffs ** 2, axis=-1)


def sobolev_norm(v, alpha):
    """Norm of ``(I - L) v`` in the fractional space H^alpha."""
    if abs(alpha) > MAX_SOBOLEV_INDEX:
        raise ParameterError(f"|alpha| must be <= {MAX_SOBOLEV_INDEX:g}, got {alpha}")
    if alpha < 0 and v.mean != 0.0:
        raise DomainError("negative Sobolev index requires a zero-mean field")
    return float(np.sqrt(_sobolev_sq(v.coeffs, v.eig.lambdas, alpha)))


def full_norm(v, s):
    """Norm on LH (+) H^s: ``sqrt(||(I-L)v||_{H^s}^2 + <v, e_0>^2)``."""
    return float(np.sqrt(_sobolev_sq(v.coeffs, v.eig.lambdas, s) + v.mean ** 2))


def mean_project(v):
    c = np.zeros_like(v.coeffs)
    c[0] = v.coeffs[0]
    return SpectralField(c, v.eig)


def complement_project(v):
    c = v.coeffs.copy()
    c[0] = 0.0
    return SpectralField(c, v.eig)


# ---------------------------------------------------------------------------
# physical <-> spectral transforms on type-I cosine nodes x_m = m L / (M - 1)


def grid_nodes(L, M):
    return np.linspace(0.0, L, M)


def trapezoid_weights(L, M):
    w = np.full(M, L / (M - 1))
    w[0] = w[-1] = 0.5 * L / (M - 1)
    return w


def _axis_norms(L, n):
    c = np.full(n, math.sqrt(2.0 / L))
    c[0] = 1.0 / math.sqrt(L)
    return c


@lru_cache(maxsize=32)
def _synthesis_matrix(L, N, M):
    m = np.arange(M)[:, None]
    j = np.arange(N + 1)[None, :]
    S = np.cos(np.pi * j * m / (M - 1)) * _axis_norms(L, N + 1)[None, :]
    S.setflags(write=False)
    return S


@lru_cache(maxsize=32)
def _analysis_matrix(L, N, M):
    S = _synthesis_matrix(L, N, M)
    Q = (S * trapezoid_weights(L, M)[:, None]).T.copy()
    if N == M - 1:
        Q[N] *= 0.5
    Q.setflags(write=False)
    return Q


@lru_cache(maxsize=32)
def _synthesis_scale(L, N, M):
    s = _axis_norms(L, N + 1)
    half = np.full(N + 1, 0.5)
    half[0] = 1.0
    if N == M - 1:
        half[N] = 1.0
    return s * half


@lru_cache(maxsize=32)
def _analysis_scale(L, N, M):
    s = _axis_norms(L, N + 1) * (0.5 * L / (M - 1))
    if N == M - 1:
        s = s.copy()
        s[N] *= 0.5
    return s


def _outer(vec, d):
    out = vec
    for _ in range(d - 1):
        out = np.multiply.outer(out, vec)
    return out


def _check_grid(N, M):
    if M < N + 1:
        raise UndersamplingError(f"grid of {M} nodes cannot represent {N + 1} modes per axis")


def synthesize(coeffs, eig, M, method="fast"):
    """Grid values of batched coefficients ``(..., n_modes)`` -> ``(..., M, ..., M)`` (reversed axes)."""
    _check_grid(eig.N, M)
    d, N = eig.d, eig.N
    lead = coeffs.shape[:-1]
    t = coeffs.reshape(lead + eig.shape)
    axes = tuple(range(len(lead), len(lead) + d))
    if method == "fast":
        t = t * _outer(_synthesis_scale(eig.L, N, M), d)
        t = np.pad(t, [(0, 0)] * len(lead) + [(0, M - N - 1)] * d)
        return scipy.fft.dctn(t, type=1, axes=axes)
    if method == "direct":
        S = _synthesis_matrix(eig.L, N, M)
        for ax in axes:
            t = np.moveaxis(np.tensordot(t, S, axes=([ax], [1])), -1, ax)
        return t
    raise ParameterError(f"unknown transform method {method!r}")


def analyze(values, eig, method="fast"):
    """Inverse of :func:`synthesize`, truncated to the modes of ``eig``."""
    d, N = eig.d, eig.N
    M = values.shape[-1]
    _check_grid(N, M)
    lead = values.shape[:-d]
    axes = tuple(range(len(lead), len(lead) + d))
    if method == "fast":
        y = scipy.fft.dctn(values, type=1, axes=axes)
        y = y[(Ellipsis,) + (slice(0, N + 1),) * d]
        y = y * _outer(_analysis_scale(eig.L, N, M), d)
    elif method == "direct":
        Q = _analysis_matrix(eig.L, N, M)
        y = values
        for ax in axes:
            y = np.moveaxis(np.tensordot(y, Q, axes=([ax], [1])), -1, ax)
    else:
        raise ParameterError(f"unknown transform method {method!r}")
    return y.reshape(lead + (eig.n_modes,))


def _natural_axes(a, d):
    if d == 1:
        return a
    nd = a.ndim
    return np.transpose(a, tuple(range(nd - d)) + tuple(range(nd - 1, nd - d - 1, -1)))


def to_physical(v, M=None, method="fast"):
    """Sample ``v`` on the ``M^d`` type-I cosine nodes; array axes follow x_0, ..., x_{d-1}."""
    M = 4 * v.eig.N if M is None else int(M)
    return _natural_axes(synthesize(v.coeffs, v.eig, M, method), v.eig.d)


def to_spectral(values, N, L, method="fast"):
    """Coefficients of grid ``values`` (shape ``(M,)*d``) up to cutoff ``N``."""
    values = np.asarray(values, dtype=float)
    d = values.ndim
    if d not in (1, 2, 3) or len(set(values.shape)) != 1:
        raise ParameterError("grid values must be a cube of shape (M,)*d with d <= 3")
    _check_finite(values, "grid values")
    eig = build_eigensystem(L, d, N)
    return SpectralField(analyze(_natural_axes(values, d), eig, method), eig)


def lp_norm(values, p, L):
    """Quadrature L^p norm of grid values on [0, L]^d; ``p = inf`` gives the max modulus."""
    values = np.asarray(values, dtype=float)
    _check_finite(values, "grid values")
    if p == np.inf or p == "inf":
        return float(np.max(np.abs(values)))
    p = float(p)
    if p < 1:
        raise ParameterError("p must be >= 1")
    w = _outer(trapezoid_weights(L, values.shape[0]), values.ndim)
    return float(np.sum(w * np.abs(values) ** p) ** (1.0 / p))
