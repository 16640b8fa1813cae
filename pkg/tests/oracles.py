"""Independent reference computations shared by several test modules."""

import itertools
import math

import numpy as np


def cosine_product_integrals(N, m):
    """I[n_1..n_m] = int_0^1 prod cos(n_i pi x) dx, by counting sign patterns with sum s_i n_i = 0."""
    n = np.arange(N + 1)
    grids = np.meshgrid(*([n] * m), indexing="ij")
    count = np.zeros(grids[0].shape)
    for signs in itertools.product((1, -1), repeat=m):
        count += sum(s * g for s, g in zip(signs, grids)) == 0
    return count / 2**m


def brute_force_PN_f(coeffs, L, d, N, pot):
    """<f(u), e_k> for u = sum_j v_j e_j, assembled from exact integrals of cosine products."""
    c = np.full(N + 1, math.sqrt(2.0 / L))
    c[0] = 1.0 / math.sqrt(L)
    a3, a2, a1, a0 = pot.f_coefficients
    V = coeffs.reshape((N + 1,) * d, order="F")
    I3, I4 = (L * cosine_product_integrals(N, m) for m in (3, 4))
    c3 = np.einsum("a,b,k,abk->abk", c, c, c, I3)
    c4 = np.einsum("a,b,g,k,abgk->abgk", c, c, c, c, I4)
    if d == 1:
        cube = np.einsum("a,b,g,abgk->k", V, V, V, c4)
        square = np.einsum("a,b,abk->k", V, V, c3)
        const = np.zeros(N + 1)
        const[0] = math.sqrt(L)
    else:
        cube = np.einsum("ij,kl,mn,ikmp,jlnq->pq", V, V, V, c4, c4)
        square = np.einsum("ij,kl,ikp,jlq->pq", V, V, c3, c3)
        const = np.zeros((N + 1, N + 1))
        const[0, 0] = L
    out = a3 * cube + a2 * square + a1 * V + a0 * const
    return out.reshape(-1, order="F")
