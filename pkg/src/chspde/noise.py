"""Diagonal Q-Wiener noise, counter-keyed Gaussian draws and the exact stochastic convolution.

The stochastic convolution Z solves dZ + A^2 Z dt = dW, Z(0) = 0.  With Q diagonal in
the eigenbasis every coefficient is an independent Ornstein-Uhlenbeck process, so it is
advanced with its exact Gaussian transition on the finest grid and simply read off at
coarser times.  Every resolution that shares a bundle therefore sees the same Z.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError, RegularityError, ResourceError
from .io import atomic_write
from .spectral import Eigensystem, SpectralField, build_eigensystem

__all__ = [
    "NoiseSpec",
    "PathBundle",
    "ConvolutionTrack",
    "make_noise_spec",
    "sample_path_bundle",
    "build_convolution",
    "convolution_at",
    "counter_normals",
    "mode_keys",
    "write_track",
    "read_track",
]

MEMORY_CAP_BYTES = 512 * 2**20
_TWO_PI = 2.0 * math.pi
_U53 = 2.0**-53


@dataclass(frozen=True)
class NoiseSpec:
    """Covariance of W, diagonal in {e_j}: ``q_j`` per mode plus the declared regularity index."""

    kind: str
    gamma_decl: float
    d: int = 1
    r: float = 0.0
    q0: float = 1.0
    values: tuple = ()
    regularity_sum: float = float("nan")
    tail_exponent: float = float("nan")

    def q(self, eig):
        """Variance multiplier of every mode of ``eig``."""
        if eig.d != self.d:
            raise ParameterError(f"noise declared for d={self.d}, eigensystem has d={eig.d}")
        lam = eig.lambdas
        if self.kind == "white":
            return np.ones(eig.n_modes)
        if self.kind == "power_law":
            q = np.empty(eig.n_modes)
            q[0] = self.q0
            q[1:] = lam[1:] ** (-self.r)
            return q
        if self.kind == "explicit":
            q = np.zeros(eig.n_modes)
            n = min(len(self.values), eig.n_modes)
            q[:n] = self.values[:n]
            return q
        if self.kind == "zero":
            return np.zeros(eig.n_modes)
        raise ParameterError(f"unknown noise kind {self.kind!r}")

    def digest(self, eig):
        """Hex SHA-256 of the q spectrum on ``eig`` (little-endian float64)."""
        return hashlib.sha256(self.q(eig).astype("<f8").tobytes()).hexdigest()


def _regularity_terms(noise, d, L, cutoff):
    eig = build_eigensystem(L, d, cutoff)
    lam = eig.lambdas[1:]
    terms = lam ** (noise.gamma_decl - 2.0) * noise.q(eig)[1:]
    # only the shell lambda <= lambda_N is complete when d > 1
    keep = lam <= eig.lambda_N * (1 + 1e-12)
    order = np.argsort(lam[keep], kind="stable")
    return terms[keep][order]


def _tail_exponent(terms):
    """Log-log slope of the sorted terms against their rank over the last half."""
    n = len(terms)
    rank = np.arange(1, n + 1, dtype=float)
    sel = slice(n // 2, n)
    t, k = terms[sel], rank[sel]
    pos = t > 0
    if pos.sum() < 2:
        return -np.inf
    return float(np.polyfit(np.log(k[pos]), np.log(t[pos]), 1)[0])


def make_noise_spec(kind, params=None, gamma_decl=1.0, d=1, L=math.pi, cutoff=None):
    """Validated covariance spectrum.

    ``kind`` is ``"white"`` (q_j = 1, d = 1 only), ``"power_law"`` (q_j = lambda_j^-r,
    ``params={"r": r, "q0": ...}``), ``"explicit"`` (``params={"values": [...]}``, flat
    mode order) or ``"zero"`` (deterministic runs).

    Finiteness of sum_j lambda_j^(gamma-2) q_j is checked on a truncated sum: the terms,
    sorted by eigenvalue, must decay faster than rank^-1 over the last half of the modes.
    """
    params = dict(params or {})
    if not gamma_decl > 0:
        raise ParameterError(f"declared regularity gamma must be > 0, got {gamma_decl}")
    if d not in (1, 2, 3):
        raise ParameterError(f"dimension must be 1, 2 or 3, got {d}")
    q0 = float(params.get("q0", 1.0))
    if q0 < 0:
        raise ParameterError("q0 must be nonnegative")
    if kind == "white":
        if d != 1:
            raise RegularityError("space-time white noise is only admissible in d = 1")
        spec = NoiseSpec("white", float(gamma_decl), d, q0=1.0)
    elif kind == "power_law":
        r = float(params.get("r", 0.0))
        if r < 0:
            raise ParameterError(f"power-law exponent must be >= 0, got {r}")
        spec = NoiseSpec("power_law", float(gamma_decl), d, r=r, q0=q0)
    elif kind == "explicit":
        values = tuple(float(x) for x in params.get("values", ()))
        if not values or any(x < 0 or not math.isfinite(x) for x in values):
            raise ParameterError("explicit spectrum must be a nonempty list of finite q_j >= 0")
        spec = NoiseSpec("explicit", float(gamma_decl), d, values=values)
    elif kind == "zero":
        spec = NoiseSpec("zero", float(gamma_decl), d, q0=0.0)
    else:
        raise ParameterError(f"unknown noise kind {kind!r}")

    if cutoff is None:
        cutoff = {1: 1024, 2: 96, 3: 24}[d]
        if kind == "explicit":
            cutoff = max(2, min(cutoff, int(round(len(spec.values) ** (1.0 / d))) - 1))
    terms = _regularity_terms(spec, d, L, cutoff)
    total = float(terms.sum())
    slope = _tail_exponent(terms) if total > 0 else -np.inf
    if not math.isfinite(total) or slope > -1.0 - 1e-6:
        raise RegularityError(
            f"sum lambda_j^(gamma-2) q_j does not look finite for gamma={gamma_decl}, r={spec.r} "
            f"(tail exponent {slope:.3f} >= -1)"
        )
    return NoiseSpec(spec.kind, spec.gamma_decl, spec.d, spec.r, spec.q0, spec.values, total, slope)


# ---------------------------------------------------------------------------
# counter-keyed normals


def _key(master_seed, path_index):
    return (int(master_seed) & 0xFFFFFFFFFFFFFFFF) | ((int(path_index) & 0xFFFFFFFFFFFFFFFF) << 64)


def mode_keys(eig):
    """Resolution-independent key of every flat mode: j_0 + 2^20 j_1 + 2^40 j_2."""
    idx = eig.mode_index.astype(np.int64)
    return sum(idx[:, a] << (20 * a) for a in range(eig.d))


def counter_normals(master_seed, path_index, keys, k0, k1):
    """Standard normals for steps ``k0 <= k < k1`` and the modes with the given keys.

    Mode ``key`` owns the Philox counter block starting at ``key << 40``; step k uses the
    word pair (2k, 2k + 1) of that block through a Box-Muller transform.  A draw is
    therefore a function of (seed, path, step, mode) alone, whatever N_max, K or the
    order of generation.
    """
    key = _key(master_seed, path_index)
    c0, skip = divmod(k0, 2)
    n_words = 2 * (k1 - k0) + 2 * skip
    out = np.empty((k1 - k0, len(keys)))
    for i, mk in enumerate(keys):
        raw = np.random.Philox(key=key, counter=(int(mk) << 40) + c0).random_raw(n_words)
        raw = raw[2 * skip :]
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _U53
        out[:, i] = np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)
    return out


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Gaussian draws xi[k, j] driving one Monte Carlo path on the finest time grid."""

    master_seed: int
    path_index: int
    eig: Eigensystem
    T: float
    K_fine: int
    dt_fine: float
    xi: np.ndarray = field(default=None, repr=False)

    @property
    def N_max(self):
        return self.eig.N

    @property
    def streaming(self):
        return self.xi is None

    def draws(self, k0=0, k1=None):
        """Draws for steps ``[k0, k1)``; regenerated from counters in streaming mode."""
        k1 = self.K_fine if k1 is None else k1
        if not 0 <= k0 <= k1 <= self.K_fine:
            raise IndexError(f"step range [{k0}, {k1}) outside [0, {self.K_fine})")
        if self.xi is not None:
            return self.xi[k0:k1]
        return counter_normals(self.master_seed, self.path_index, mode_keys(self.eig), k0, k1)


def _steps(T, dt):
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-12 * max(1.0, T):
        raise ParameterError(f"T={T} is not an integer multiple of dt={dt}")
    return K


def sample_path_bundle(master_seed, path_index, eig, T, dt_fine, streaming=False, memory_cap=MEMORY_CAP_BYTES):
    """Draws for one path; a pure function of ``(master_seed, path_index)``.

    ``eig`` fixes the mode set (N_max and d; L only matters later for Z).
    """
    K = _steps(T, dt_fine)
    if streaming:
        return PathBundle(int(master_seed), int(path_index), eig, float(T), K, float(dt_fine), None)
    nbytes = 8 * K * eig.n_modes
    if nbytes > memory_cap:
        raise ResourceError(f"bundle needs {nbytes / 2**20:.1f} MiB > cap {memory_cap / 2**20:.1f} MiB; use streaming")
    xi = counter_normals(master_seed, path_index, mode_keys(eig), 0, K)
    xi.setflags(write=False)
    return PathBundle(int(master_seed), int(path_index), eig, float(T), K, float(dt_fine), xi)


def ou_coefficients(lambdas, q, dt):
    """Exact one-step decay and noise amplitude of dZ_j = -lambda_j^2 Z_j dt + sqrt(q_j) dbeta_j."""
    rate = lambdas**2
    decay = np.exp(-rate * dt)
    var = np.empty_like(rate)
    pos = rate > 0
    var[pos] = q[pos] * (-np.expm1(-2.0 * rate[pos] * dt)) / (2.0 * rate[pos])
    var[~pos] = q[~pos] * dt
    return decay, np.sqrt(var)


def ou_recursion(xi, decay, sigma, z0=0.0):
    """Z[0] = z0, Z[k+1] = decay Z[k] + sigma xi[k]; ``xi`` has shape (..., K, n)."""
    K = xi.shape[-2]
    Z = np.empty(xi.shape[:-2] + (K + 1, xi.shape[-1]))
    Z[..., 0, :] = z0
    for k in range(K):
        Z[..., k + 1, :] = decay * Z[..., k, :] + sigma * xi[..., k, :]
    return Z


@dataclass(frozen=True, eq=False)
class ConvolutionTrack:
    """Z at every fine grid time, shape ``(K_fine + 1, n_modes)``."""

    Z: np.ndarray = field(repr=False)
    bundle: PathBundle
    noise: NoiseSpec

    @property
    def eig(self):
        return self.bundle.eig

    @property
    def dt_fine(self):
        return self.bundle.dt_fine

    @property
    def K_fine(self):
        return self.bundle.K_fine


def build_convolution(bundle, noise, block=4096):
    """Exact OU transition of every mode on the bundle's fine grid."""
    eig = bundle.eig
    decay, sigma = ou_coefficients(eig.lambdas, noise.q(eig), bundle.dt_fine)
    Z = np.empty((bundle.K_fine + 1, eig.n_modes))
    Z[0] = 0.0
    for k0 in range(0, bundle.K_fine, block):
        k1 = min(k0 + block, bundle.K_fine)
        Z[k0 + 1 : k1 + 1] = ou_recursion(bundle.draws(k0, k1), decay, sigma, Z[k0])[1:]
    Z.setflags(write=False)
    return ConvolutionTrack(Z, bundle, noise)


def convolution_at(track, N, k, stride=1):
    """P^N Z(t_k) on the coarse grid with step ``stride * dt_fine``."""
    fine = k * stride
    if k < 0 or stride < 1 or fine > track.K_fine:
        raise IndexError(f"coarse index {k} with stride {stride} outside fine grid of {track.K_fine} steps")
    eig = build_eigensystem(track.eig.L, track.eig.d, N)
    return SpectralField(track.Z[fine, track.eig.submodes(N)], eig)


# ---------------------------------------------------------------------------
# binary dump: header then little-endian float64 body, mode-major

_MAGIC = b"CHZT"
_HEADER = struct.Struct("<4sIQQIIQdd32s")


def write_track(path, track):
    """Write ``track`` as header (seed, path, N_max, d, K_fine, dt_fine, L, sha256 of q) + body."""
    b = track.bundle
    header = _HEADER.pack(
        _MAGIC, 1, b.master_seed & 0xFFFFFFFFFFFFFFFF, b.path_index, b.N_max, b.eig.d,
        b.K_fine, b.dt_fine, b.eig.L, bytes.fromhex(track.noise.digest(b.eig)),
    )
    body = np.ascontiguousarray(track.Z.T, dtype="<f8").tobytes()
    atomic_write(path, header + body)


def read_track(path):
    """Read a dump written by :func:`write_track`; returns ``(header dict, Z)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, seed, path_index, N_max, d, K, dt, L, digest = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not a convolution track file")
    n_modes = (N_max + 1) ** d
    Z = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n_modes, K + 1).T
    header = dict(version=version, master_seed=seed, path_index=path_index, N_max=N_max, d=d,
                  K_fine=K, dt_fine=dt, L=L, q_sha256=digest.hex())
    return header, Z
