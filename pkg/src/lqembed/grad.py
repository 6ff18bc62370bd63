"""Reverse-mode gradients for the linear-quadratic embedding loss.

Everything here is hand-derived for the closed-form quadratic field; there
is no autodiff tape.  The training loss decomposes into a one-step forecast
term, a latent-consistency term, and (in constrained mode) the
energy-preservation and negative-eigenvalue penalties; this module returns
the exact gradient of that composite with respect to every model parameter
and every latent state.

Backprop through time is a discrete adjoint of the fixed-step RK4 map: the
forward pass caches the four stage states of every step and the backward
pass chains their transposed Jacobians.  That yields the derivative of the
loss actually computed, not of the underlying continuous flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .lqm import (
    LQModel,
    ShiftedSystem,
    build_shifted,
    eig_penalty,
    eig_penalty_slope,
    energy_residual_grad,
    eval_field,
)

__all__ = [
    "GradientBundle",
    "LossSetup",
    "LossInfo",
    "rk4_forward",
    "rk4_backward",
    "grad_rk4_chain",
    "grad_eig_penalty",
    "grad_total_loss",
]


@dataclass
class GradientBundle:
    """Gradients matching an LQModel's parameter blocks plus latent states.

    ``d_q`` is the gradient with respect to the packed symmetric quadratic
    parameters, so symmetry of the underlying tensor gradient is automatic.
    ``d_latent`` is None when the loss involves no latent table.
    """

    d_c: np.ndarray
    d_L: np.ndarray
    d_q: np.ndarray
    d_m: np.ndarray
    d_latent: np.ndarray | None = None

    @classmethod
    def zeros(cls, model: LQModel, n_latent: int | None = None,
              latent_width: int | None = None) -> "GradientBundle":
        d = model.dim
        lat = None
        if n_latent is not None:
            lat = np.zeros((n_latent, d if latent_width is None else latent_width))
        return cls(np.zeros(d), np.zeros((d, d)),
                   np.zeros(model.quad.n_params), np.zeros(d), lat)

    def add_(self, other: "GradientBundle", scale: float = 1.0) -> None:
        self.d_c += scale * other.d_c
        self.d_L += scale * other.d_L
        self.d_q += scale * other.d_q
        self.d_m += scale * other.d_m
        if self.d_latent is not None and other.d_latent is not None:
            self.d_latent += scale * other.d_latent

    def all_finite(self) -> bool:
        blocks = [self.d_c, self.d_L, self.d_q, self.d_m]
        if self.d_latent is not None:
            blocks.append(self.d_latent)
        return all(np.all(np.isfinite(b)) for b in blocks)

    def block_norms(self) -> dict:
        norms = {
            "c": float(np.linalg.norm(self.d_c)),
            "L": float(np.linalg.norm(self.d_L)),
            "Q": float(np.linalg.norm(self.d_q)),
            "m": float(np.linalg.norm(self.d_m)),
        }
        norms["latent"] = (0.0 if self.d_latent is None
                           else float(np.linalg.norm(self.d_latent)))
        return norms


# ---------------------------------------------------------------------------
# discrete adjoint of the composed RK4 map
# ---------------------------------------------------------------------------

def rk4_forward(model: LQModel, U0: np.ndarray, n_steps: int, dt: float):
    """Run n_steps RK4 steps of size dt, caching every stage state.

    U0 may be a single state (d,) or a batch (B, d).  Returns the final
    state(s) and the cache consumed by rk4_backward.
    """
    u = np.asarray(U0, dtype=float)
    half = 0.5 * dt
    sixth = dt / 6.0
    stages = []
    for _ in range(n_steps):
        s1 = u
        k1 = eval_field(model, s1)
        s2 = s1 + half * k1
        k2 = eval_field(model, s2)
        s3 = s1 + half * k2
        k3 = eval_field(model, s3)
        s4 = s1 + dt * k3
        k4 = eval_field(model, s4)
        u = s1 + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        stages.append((s1, s2, s3, s4))
    return u, stages


def _vjp_state(model: LQModel, S: np.ndarray, W: np.ndarray) -> np.ndarray:
    # transposed field Jacobian at S applied to W: L^T w + quad part
    return W @ model.L + model.quad.vjp_state(S, W)


def _accumulate_params(bundle: GradientBundle, model: LQModel,
                       S: np.ndarray, W: np.ndarray) -> None:
    d = model.dim
    Wf = W.reshape(-1, d)
    Sf = S.reshape(-1, d)
    bundle.d_c += Wf.sum(axis=0)
    bundle.d_L += Wf.T @ Sf
    bundle.d_q += model.quad.grad_params(S, W)


def rk4_backward(model: LQModel, stages: list, dt: float,
                 upstream: np.ndarray):
    """Reverse the cached RK4 chain.

    upstream is the loss gradient at the final state (same shape as the
    forward states).  Returns (GradientBundle without latent block, d_u0).
    """
    g = np.asarray(upstream, dtype=float)
    bundle = GradientBundle.zeros(model)
    half = 0.5 * dt
    sixth = dt / 6.0
    third = dt / 3.0
    for (s1, s2, s3, s4) in reversed(stages):
        bar_k4 = sixth * g
        _accumulate_params(bundle, model, s4, bar_k4)
        bar_s4 = _vjp_state(model, s4, bar_k4)
        bar_k3 = third * g + dt * bar_s4
        _accumulate_params(bundle, model, s3, bar_k3)
        bar_s3 = _vjp_state(model, s3, bar_k3)
        bar_k2 = third * g + half * bar_s3
        _accumulate_params(bundle, model, s2, bar_k2)
        bar_s2 = _vjp_state(model, s2, bar_k2)
        bar_k1 = sixth * g + half * bar_s2
        _accumulate_params(bundle, model, s1, bar_k1)
        bar_s1 = _vjp_state(model, s1, bar_k1)
        g = g + bar_s1 + bar_s2 + bar_s3 + bar_s4
    return bundle, g


def grad_rk4_chain(model: LQModel, u0: np.ndarray, n_steps: int, dt: float,
                   upstream: np.ndarray):
    """Gradient of upstream . Phi^{n_steps}(u0) wrt parameters and u0."""
    _, stages = rk4_forward(model, u0, n_steps, dt)
    return rk4_backward(model, stages, dt, upstream)


# ---------------------------------------------------------------------------
# eigenvalue-penalty gradient
# ---------------------------------------------------------------------------

DEGENERACY_GAP = 1e-9


def grad_eig_penalty(model: LQModel, sys: ShiftedSystem | None = None):
    """Penalty value and its gradient through the shifted-system spectrum.

    Chains d(penalty)/d(alpha_i) through the symmetric eigenvalue
    perturbation d(alpha_i)/d(A_s)_{jk} = v_ij v_ik, then through
    A_s = (A + A^T)/2 and the dependence of A on L, Q and m.

    Returns (value, d_L, d_q, d_m, degenerate).  The degenerate flag marks
    an eigenvalue gap below 1e-9; the formula is still returned.
    """
    if sys is None:
        sys = build_shifted(model)
    alphas = sys.eigenvalues
    value = eig_penalty(alphas)
    degenerate = bool(alphas.size > 1
                      and float(np.min(np.diff(alphas))) < DEGENERACY_GAP)
    slope = eig_penalty_slope(alphas)
    d = model.dim
    if not np.any(slope):
        zq = np.zeros(model.quad.n_params)
        return value, np.zeros((d, d)), zq, np.zeros(d), degenerate

    V = sys.eigenvectors
    G_s = (V * slope) @ V.T
    G_s = 0.5 * (G_s + G_s.T)
    # A_s = (A + A^T)/2 with G_s symmetric folds to d_A = G_s
    d_L = G_s.copy()
    Qd = model.quad.dense()
    # A's quadratic part is 2 sum_k Q[i,j,k] m_k
    d_m = 2.0 * np.einsum("ij,ijk->k", G_s, Qd)
    dense_grad = 2.0 * G_s[:, :, None] * model.m[None, None, :]
    d_q = model.quad.accumulate_dense_grad(dense_grad)
    return value, d_L, d_q, d_m, degenerate


# ---------------------------------------------------------------------------
# total training loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSetup:
    """Shape and weighting of the composite training loss."""

    r: int
    dt: float
    substeps: int = 1
    lambda1: float = 1.0
    lambda2: float = 1e3
    lambda3: float = 1e3
    constrained: bool = False
    chunk_length: int = 512

    def __post_init__(self):
        if self.r < 1:
            raise ContractViolation("observed dimension r must be >= 1")
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ContractViolation("dt must be positive and finite")
        if self.substeps < 1 or self.chunk_length < 1:
            raise ContractViolation("substeps and chunk_length must be >= 1")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0.0:
            raise ContractViolation("loss weights must be nonnegative")


@dataclass
class LossInfo:
    """Loss decomposition plus spectral byproducts for reuse."""

    forecast: float
    consistency: float
    energy: float
    eig_penalty: float
    eigenvalues: np.ndarray | None = None
    eigenvectors: np.ndarray | None = None
    degenerate: bool = False


def grad_total_loss(model: LQModel, latent: np.ndarray,
                    observations: np.ndarray, setup: LossSetup,
                    warm_start: np.ndarray | None = None):
    """Composite loss and its exact gradient.

    loss = sum_t ||decode(Phi(u_t)) - x_{t+1}||^2
         + lambda1 * sum_t ||Phi(u_t) - u_{t+1}||^2
         (+ lambda2 * energy_residual + lambda3 * eig_penalty when constrained)

    with u_t the observation row concatenated with latent row t and decode
    extracting the first r components (adding m first in constrained mode).
    Chunks of consecutive pairs are processed in ascending order, so the
    result is deterministic for identical inputs.

    Returns (loss, GradientBundle, LossInfo).
    """
    obs = np.asarray(observations, dtype=float)
    Y = np.asarray(latent, dtype=float)
    d_E = model.dim
    r = setup.r
    if obs.ndim != 2 or obs.shape[1] != r:
        raise ContractViolation(
            f"observations must be (N, {r}), got {obs.shape}")
    N = obs.shape[0]
    if N < 2:
        raise ContractViolation("need at least two observations")
    if r > d_E:
        raise ContractViolation("r cannot exceed the model dimension")
    if Y.ndim != 2 or Y.shape != (N, d_E - r):
        raise ContractViolation(
            f"latent table must be ({N}, {d_E - r}), got {Y.shape}")

    U = np.concatenate([obs, Y], axis=1)
    U0 = U[:-1]
    U1 = U[1:]
    O1 = obs[1:]
    n_pairs = N - 1
    h = setup.dt / setup.substeps
    lam1 = setup.lambda1
    decode_shift = model.m[:r] if setup.constrained else 0.0

    bundle = GradientBundle.zeros(model, n_latent=N, latent_width=d_E - r)
    bar_U0 = np.empty_like(U0)
    res_c_all = np.empty_like(U0)
    sum_res_f = np.zeros(r)
    forecast = 0.0
    consistency = 0.0

    for start in range(0, n_pairs, setup.chunk_length):
        sl = slice(start, min(start + setup.chunk_length, n_pairs))
        phi, cache = rk4_forward(model, U0[sl], setup.substeps, h)
        res_f = phi[:, :r] + decode_shift - O1[sl]
        res_c = phi - U1[sl]
        forecast += float(np.sum(res_f * res_f))
        consistency += float(np.sum(res_c * res_c))
        upstream = (2.0 * lam1) * res_c
        upstream[:, :r] += 2.0 * res_f
        contrib, bar = rk4_backward(model, cache, h, upstream)
        bundle.add_(contrib)
        bar_U0[sl] = bar
        res_c_all[sl] = res_c
        sum_res_f += res_f.sum(axis=0)

    if d_E > r:
        bundle.d_latent[:-1] += bar_U0[:, r:]
        bundle.d_latent[1:] += (-2.0 * lam1) * res_c_all[:, r:]
    if setup.constrained:
        bundle.d_m[:r] += 2.0 * sum_res_f

    loss = forecast + lam1 * consistency
    info = LossInfo(forecast=forecast, consistency=consistency,
                    energy=0.0, eig_penalty=0.0)

    if setup.constrained:
        e_val, e_grad = energy_residual_grad(model.quad)
        bundle.d_q += setup.lambda2 * e_grad
        sys = build_shifted(model, warm_start=warm_start)
        p_val, p_L, p_q, p_m, degen = grad_eig_penalty(model, sys)
        bundle.d_L += setup.lambda3 * p_L
        bundle.d_q += setup.lambda3 * p_q
        bundle.d_m += setup.lambda3 * p_m
        loss += setup.lambda2 * e_val + setup.lambda3 * p_val
        info.energy = e_val
        info.eig_penalty = p_val
        info.eigenvalues = sys.eigenvalues
        info.eigenvectors = sys.eigenvectors
        info.degenerate = degen

    return loss, bundle, info
