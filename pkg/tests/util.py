"""Shared helpers for the test suite: random model builders and slow oracles.

Oracles here are deliberately naive (triple loops, finite differences) so
they cannot share a bug with the library's vectorized implementations.
"""

from __future__ import annotations

import numpy as np

from lqembed.lqm import ConvQuad, DenseQuad, LQModel


# ---------------------------------------------------------------------------
# random model construction
# ---------------------------------------------------------------------------

def random_dense_quad(dim: int, rng: np.random.Generator, scale: float = 1.0) -> DenseQuad:
    n_pack = dim * (dim + 1) // 2
    return DenseQuad(dim, scale * rng.standard_normal((dim, n_pack)))


def random_conv_quad(dim: int, reach: int, rng: np.random.Generator,
                     scale: float = 1.0) -> ConvQuad:
    n_off = 2 * reach + 1
    n_pack = n_off * (n_off + 1) // 2
    return ConvQuad(dim, reach, scale * rng.standard_normal(n_pack))


def full_symmetrization(Q: np.ndarray) -> np.ndarray:
    """Average of Q over all six index permutations."""
    out = np.zeros_like(Q)
    for axes in [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]:
        out += np.transpose(Q, axes)
    return out / 6.0


def project_energy_preserving(quad: DenseQuad) -> DenseQuad:
    """Remove the fully symmetric part, leaving u . quad(u) = 0 exactly."""
    Q = quad.dense()
    Qp = Q - full_symmetrization(Q)
    rows, cols = np.triu_indices(quad.dim)
    return DenseQuad(quad.dim, Qp[:, rows, cols])


def random_trapping_model(dim: int, rng: np.random.Generator,
                          eig_range=(-2.0, -0.2), c_scale: float = 1.0,
                          quad_scale: float = 0.5) -> LQModel:
    """Energy-preserving quadratic + linear part with negative-definite
    symmetric part, so the trapping-ball analysis applies with m = 0."""
    quad = project_energy_preserving(random_dense_quad(dim, rng, quad_scale))
    # symmetric negative-definite part in a random orthonormal basis
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eigs = rng.uniform(eig_range[0], eig_range[1], size=dim)
    sym = basis @ np.diag(eigs) @ basis.T
    antisym = rng.standard_normal((dim, dim))
    antisym = 0.5 * (antisym - antisym.T)
    L = sym + antisym
    c = c_scale * rng.standard_normal(dim)
    return LQModel(dim, c, L, quad, np.zeros(dim))


def random_model(dim: int, rng: np.random.Generator, scale: float = 0.5,
                 structure: str = "dense", reach: int = 1) -> LQModel:
    if structure == "dense":
        quad = random_dense_quad(dim, rng, scale)
    else:
        quad = random_conv_quad(dim, reach, rng, scale)
    return LQModel(dim, scale * rng.standard_normal(dim),
                   scale * rng.standard_normal((dim, dim)),
                   quad, scale * rng.standard_normal(dim))


# ---------------------------------------------------------------------------
# slow oracles
# ---------------------------------------------------------------------------

def quad_eval_oracle(Q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Triple loop over the dense tensor: out_i = sum_jk Q[i,j,k] u_j u_k."""
    d = Q.shape[0]
    out = np.zeros(d)
    for i in range(d):
        for j in range(d):
            for k in range(d):
                out[i] += Q[i, j, k] * u[j] * u[k]
    return out


def energy_residual_oracle(Q: np.ndarray) -> float:
    """Multiplicity-weighted sum over unordered triples i <= j <= k of
    (q_ijk + q_jik + q_kij)^2."""
    d = Q.shape[0]
    total = 0.0
    for i in range(d):
        for j in range(i, d):
            for k in range(j, d):
                if i == j == k:
                    w = 1
                elif i == j or j == k or i == k:
                    w = 3
                else:
                    w = 6
                e = Q[i, j, k] + Q[j, i, k] + Q[k, i, j]
                total += w * e * e
    return total


def fd_gradient(fun, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fun(xp) - fun(xm)) / (2.0 * step)
    return g


def fd_jacobian(fun, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a vector function of a vector."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        J[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * step)
    return J


def rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-8) -> float:
    got = np.asarray(got, dtype=float).reshape(-1)
    want = np.asarray(want, dtype=float).reshape(-1)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))
