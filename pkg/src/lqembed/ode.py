"""Fixed-step RK4 flows and rollouts.

The learned flow between two observation times is one or more classical
RK4 steps; no adaptive integration is used here.  Rollouts never raise on
divergence: they truncate at the blowup step and flag the trajectory, so
long metric sweeps over unstable models can run unattended.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlowupError, ContractViolation
from .lqm import LQModel, eval_field, field_jacobian

__all__ = [
    "BLOWUP_NORM",
    "FlowConfig",
    "Trajectory",
    "rk4_step",
    "flow_map",
    "rollout",
    "rollout_batch",
    "rollout_with_tangent",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

# states whose Euclidean norm passes this are treated as diverged
BLOWUP_NORM = 1.0e9


@dataclass(frozen=True)
class FlowConfig:
    """Time step between observations and RK4 substeps per step."""

    dt: float
    substeps: int = 1

    def __post_init__(self):
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ContractViolation(f"dt must be positive and finite, got {self.dt}")
        if not (isinstance(self.substeps, int) and self.substeps >= 1):
            raise ContractViolation(f"substeps must be a positive int, got {self.substeps}")

    @property
    def dt_sub(self) -> float:
        return self.dt / self.substeps


@dataclass
class Trajectory:
    """Recorded states at uniform times; possibly truncated by a blowup.

    ``states[k]`` is the state at ``times[k]``.  When ``blowup`` is set the
    arrays stop at the last finite, in-range state and ``blowup_index`` is
    the step index whose evaluation failed.
    """

    times: np.ndarray
    states: np.ndarray
    blowup: bool = False
    blowup_index: int | None = None


def _as_field(field_or_model):
    if isinstance(field_or_model, LQModel):
        model = field_or_model
        return lambda u: eval_field(model, u)
    if callable(field_or_model):
        return field_or_model
    raise ContractViolation("expected an LQModel or a callable field")


def rk4_step(field_or_model, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step; raises BlowupError on a non-finite stage."""
    f = _as_field(field_or_model)
    u = np.asarray(u, dtype=float)
    half = 0.5 * dt
    k1 = f(u)
    if not np.all(np.isfinite(k1)):
        raise BlowupError("non-finite RK4 stage", stage="rk4:k1")
    k2 = f(u + half * k1)
    if not np.all(np.isfinite(k2)):
        raise BlowupError("non-finite RK4 stage", stage="rk4:k2")
    k3 = f(u + half * k2)
    if not np.all(np.isfinite(k3)):
        raise BlowupError("non-finite RK4 stage", stage="rk4:k3")
    k4 = f(u + dt * k3)
    if not np.all(np.isfinite(k4)):
        raise BlowupError("non-finite RK4 stage", stage="rk4:k4")
    return u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_map(field_or_model, u: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    """Advance one observation interval (cfg.substeps RK4 steps)."""
    h = cfg.dt_sub
    for _ in range(cfg.substeps):
        u = rk4_step(field_or_model, u, h)
    return u


def rollout(field_or_model, u0: np.ndarray, n_steps: int, cfg: FlowConfig) -> Trajectory:
    """Record n_steps observation intervals starting from u0.

    Identical inputs produce bit-identical trajectories.  Composition is
    exact: rolling n then m steps from the stored endpoint reproduces a
    single (n + m)-step rollout.
    """
    u = np.asarray(u0, dtype=float).reshape(-1)
    d = u.shape[0]
    states = np.empty((n_steps + 1, d))
    states[0] = u
    times = cfg.dt * np.arange(n_steps + 1)
    for k in range(n_steps):
        try:
            u = flow_map(field_or_model, u, cfg)
        except BlowupError:
            return Trajectory(times[: k + 1], states[: k + 1].copy(),
                              blowup=True, blowup_index=k)
        if not np.all(np.isfinite(u)) or float(np.linalg.norm(u)) > BLOWUP_NORM:
            return Trajectory(times[: k + 1], states[: k + 1].copy(),
                              blowup=True, blowup_index=k)
        states[k + 1] = u
    return Trajectory(times, states)


def rollout_batch(field_or_model, U0: np.ndarray, n_steps: int, cfg: FlowConfig,
                  record: bool = False):
    """Roll a batch of initial states, freezing rows that diverge.

    Returns (final_states, alive, max_norms, blowup_step, recorded) where
    ``alive[b]`` is False if row b blew up, ``max_norms[b]`` is the largest
    state norm seen along row b (including the initial state), and
    ``blowup_step[b]`` is the step at which row b died (-1 if it did not).
    ``recorded`` is the (n_steps+1, B, d) state history when ``record``.
    """
    f = _as_field(field_or_model)
    U = np.asarray(U0, dtype=float).copy()
    if U.ndim != 2:
        raise ContractViolation("rollout_batch expects a (batch, dim) array")
    B = U.shape[0]
    alive = np.ones(B, dtype=bool)
    max_norms = np.linalg.norm(U, axis=1)
    blowup_step = np.full(B, -1, dtype=int)
    recorded = np.empty((n_steps + 1,) + U.shape) if record else None
    if record:
        recorded[0] = U
    h = cfg.dt_sub
    half = 0.5 * h
    for k in range(n_steps):
        if not np.any(alive):
            if record:
                recorded[k + 1:] = U
            break
        Ua = U[alive]
        for _ in range(cfg.substeps):
            k1 = f(Ua)
            k2 = f(Ua + half * k1)
            k3 = f(Ua + half * k2)
            k4 = f(Ua + h * k3)
            Ua = Ua + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        with np.errstate(over="ignore", invalid="ignore"):
            norms = np.linalg.norm(Ua, axis=1)
        ok = np.all(np.isfinite(Ua), axis=1) & (norms <= BLOWUP_NORM)
        idx = np.flatnonzero(alive)
        died = idx[~ok]
        blowup_step[died] = k
        alive[died] = False
        survivors = idx[ok]
        U[survivors] = Ua[ok]
        max_norms[survivors] = np.maximum(max_norms[survivors], norms[ok])
        if record:
            recorded[k + 1] = U
    return U, alive, max_norms, blowup_step, recorded


def rollout_with_tangent(model: LQModel, u0: np.ndarray, n_steps: int,
                         cfg: FlowConfig, basis: np.ndarray | None = None):
    """Rollout plus tangent vectors propagated through the RK4 variational map.

    The tangent update is the exact differential of the discrete RK4 step.
    Vectors are re-orthonormalized after every RK4 step and the log of each
    stretch factor is recorded.

    Returns (Trajectory, log_stretches, dt_sub) with log_stretches of shape
    (n_steps * substeps, k) for k tangent vectors.
    """
    u = np.asarray(u0, dtype=float).reshape(-1)
    d = u.shape[0]
    if basis is None:
        basis = np.eye(d, 1)
    V = np.asarray(basis, dtype=float).copy()
    if V.ndim == 1:
        V = V[:, None]
    k_vec = V.shape[1]
    # require an orthonormal starting basis
    if not np.allclose(V.T @ V, np.eye(k_vec), atol=1e-10):
        raise ContractViolation("tangent basis must be orthonormal")

    h = cfg.dt_sub
    half = 0.5 * h
    states = np.empty((n_steps + 1, d))
    states[0] = u
    times = cfg.dt * np.arange(n_steps + 1)
    logs = np.empty((n_steps * cfg.substeps, k_vec))
    row = 0
    for step in range(n_steps):
        for _ in range(cfg.substeps):
            k1 = eval_field(model, u)
            K1 = field_jacobian(model, u) @ V
            s2 = u + half * k1
            k2 = eval_field(model, s2)
            K2 = field_jacobian(model, s2) @ (V + half * K1)
            s3 = u + half * k2
            k3 = eval_field(model, s3)
            K3 = field_jacobian(model, s3) @ (V + half * K2)
            s4 = u + h * k3
            k4 = eval_field(model, s4)
            K4 = field_jacobian(model, s4) @ (V + h * K3)
            u = u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            V = V + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
            if not np.all(np.isfinite(u)) or float(np.linalg.norm(u)) > BLOWUP_NORM:
                return (Trajectory(times[: step + 1], states[: step + 1].copy(),
                                   blowup=True, blowup_index=step),
                        logs[:row].copy(), h)
            if k_vec == 1:
                stretch = float(np.linalg.norm(V))
                logs[row, 0] = np.log(stretch)
                V = V / stretch
            else:
                Qm, Rm = np.linalg.qr(V)
                sign = np.sign(np.diag(Rm))
                sign[sign == 0.0] = 1.0
                V = Qm * sign
                logs[row] = np.log(np.abs(np.diag(Rm)))
            row += 1
        states[step + 1] = u
    return Trajectory(times, states), logs, h


# ---------------------------------------------------------------------------
# trajectory CSV export
# ---------------------------------------------------------------------------

def write_trajectory_csv(traj: Trajectory, path) -> None:
    """CSV with header t,u_0,...,u_{d-1}; 17 significant digits."""
    d = traj.states.shape[1]
    header = "t," + ",".join(f"u_{i}" for i in range(d))
    data = np.column_stack([traj.times, traj.states])
    np.savetxt(path, data, delimiter=",", header=header, comments="",
               fmt="%.17g")


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(times=data[:, 0].copy(), states=data[:, 1:].copy())
