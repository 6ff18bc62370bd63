"""Ground-truth generators: chaotic ODE benchmarks, a reduced-scale
shallow-water solver with patch EOF observations, and series I/O.

The ODE benchmarks are integrated with an adaptive high-accuracy reference
method (not the package's fixed-step RK4), so generated data is independent
of the flow used for training and evaluation.  The shallow-water solver is
a square periodic Arakawa-C grid with forward-backward stepping: linear
momentum equations with a beta-plane Coriolis term and the fully nonlinear
flux-form continuity equation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BlowupError, ContractViolation
from .lqm import ConvQuad, DenseQuad, LQModel

__all__ = [
    "ObservationSeries",
    "SWEConfig",
    "EOFBasis",
    "lorenz63_field",
    "lorenz63_true_model",
    "lorenz96_field",
    "lorenz96_true_model",
    "generate",
    "swe_initial_state",
    "swe_step",
    "swe_run",
    "extract_patch_and_eof",
    "write_series",
    "read_series",
    "write_snapshots",
    "read_snapshots",
]


# ---------------------------------------------------------------------------
# observation series
# ---------------------------------------------------------------------------

@dataclass
class ObservationSeries:
    """Uniformly sampled observation rows plus generator metadata."""

    dt: float
    values: np.ndarray          # (N, n)
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ContractViolation("series values must be a 2-d array")
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ContractViolation("series dt must be positive and finite")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def write_series(series: ObservationSeries, path) -> None:
    """CSV `t,x_0,...,x_{n-1}` plus a JSON metadata sidecar."""
    path = Path(path)
    n, width = series.values.shape
    t = series.dt * np.arange(n)
    header = "t," + ",".join(f"x_{i}" for i in range(width))
    np.savetxt(path, np.column_stack([t, series.values]), delimiter=",",
               header=header, comments="", fmt="%.17g")
    sidecar = dict(series.meta)
    sidecar["dt"] = series.dt
    sidecar["n_steps"] = n
    sidecar["width"] = width
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def read_series(path) -> ObservationSeries:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    dt = meta.get("dt")
    if dt is None:
        if data.shape[0] < 2:
            raise ContractViolation("cannot infer dt from a single row")
        dt = float(data[1, 0] - data[0, 0])
    meta = {k: v for k, v in meta.items()
            if k not in ("dt", "n_steps", "width")}
    return ObservationSeries(dt=float(dt), values=data[:, 1:].copy(),
                             meta=meta)


def write_snapshots(path, snapshots: np.ndarray) -> None:
    """Flat row-major float64 dump with a text header `nx ny n`."""
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots.ndim != 3:
        raise ContractViolation("snapshots must be (n, ny, nx)")
    n, ny, nx = snapshots.shape
    with open(path, "wb") as fh:
        fh.write(f"{nx} {ny} {n}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(snapshots, dtype="<f8").tobytes())


def read_snapshots(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        nx, ny, n = (int(v) for v in header)
        arr = np.frombuffer(fh.read(), dtype="<f8").reshape(n, ny, nx)
    return arr.copy(), (nx, ny, n)


# ---------------------------------------------------------------------------
# Lorenz-63
# ---------------------------------------------------------------------------

def lorenz63_field(z: np.ndarray, sigma: float = 10.0, rho: float = 28.0,
                   beta: float = 8.0 / 3.0) -> np.ndarray:
    """Canonical three-variable convection field, batched on leading axes."""
    z = np.asarray(z, dtype=float)
    z1, z2, z3 = z[..., 0], z[..., 1], z[..., 2]
    return np.stack([sigma * (z2 - z1),
                     rho * z1 - z2 - z1 * z3,
                     z1 * z2 - beta * z3], axis=-1)


def lorenz63_true_model(sigma: float = 10.0, rho: float = 28.0,
                        beta: float = 8.0 / 3.0) -> LQModel:
    """The generating field written as an LQModel (dense quadratic)."""
    L = np.array([[-sigma, sigma, 0.0],
                  [rho, -1.0, 0.0],
                  [0.0, 0.0, -beta]])
    quad = DenseQuad(3)
    params = np.zeros_like(quad.params)
    # packed pair order for d=3: (0,0),(0,1),(0,2),(1,1),(1,2),(2,2)
    params[1, 2] = -0.5        # -z1 z3 in the second component
    params[2, 1] = 0.5         # +z1 z2 in the third component
    quad.set_flat(params.reshape(-1))
    return LQModel(3, np.zeros(3), L, quad, np.zeros(3))


# ---------------------------------------------------------------------------
# Lorenz-96
# ---------------------------------------------------------------------------

def lorenz96_field(z: np.ndarray, F: float = 8.0) -> np.ndarray:
    """Cyclic advection-dissipation-forcing field, batched on leading axes."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < 4:
        raise ContractViolation("lorenz96 needs dimension >= 4")
    zp1 = np.roll(z, -1, axis=-1)
    zm1 = np.roll(z, 1, axis=-1)
    zm2 = np.roll(z, 2, axis=-1)
    return (zp1 - zm2) * zm1 - z + F


def lorenz96_true_model(s: int = 40, F: float = 8.0) -> LQModel:
    """The generating field as a convolutional LQModel with reach 2."""
    if s < 5:
        raise ContractViolation("convolutional form needs dimension >= 5")
    quad = ConvQuad(s, 2)
    offs = list(int(o) for o in quad.offsets)
    stencil = np.zeros((len(offs), len(offs)))

    def set_pair(a, b, val):
        ia, ib = offs.index(a), offs.index(b)
        stencil[ia, ib] = stencil[ib, ia] = val

    # (z_{i+1} - z_{i-2}) z_{i-1}: each unordered pair is counted twice
    set_pair(-1, 1, 0.5)
    set_pair(-2, -1, -0.5)
    quad.set_flat(stencil[quad._ia, quad._ib])
    return LQModel(s, np.full(s, F), -np.eye(s), quad, np.zeros(s))


# ---------------------------------------------------------------------------
# reference-integrator generation
# ---------------------------------------------------------------------------

_SPLIT_FRACTION = 0.8   # train share for the chaotic benchmarks


def generate(system: str, n_steps: int, dt: float, transient: int,
             seed: int, observe: str = "default",
             params: dict | None = None) -> ObservationSeries:
    """Integrate a named system with an adaptive RK45 reference (tol 1e-10),
    discard the transient, and apply the observation operator.

    observe: "default" applies the per-system operator (first component for
    lorenz63, first half for lorenz96); "full" returns the whole state.
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if system == "lorenz63":
        sigma = params.get("sigma", 10.0)
        rho = params.get("rho", 28.0)
        beta = params.get("beta", 8.0 / 3.0)
        ic = np.array([1.0, 1.0, 1.0]) + 0.5 * rng.standard_normal(3)
        fun = lambda t, z: lorenz63_field(z, sigma, rho, beta)
        observed = slice(0, 1)
        sys_params = {"sigma": sigma, "rho": rho, "beta": beta}
    elif system == "lorenz96":
        s = int(params.get("s", 40))
        F = params.get("F", 8.0)
        ic = F + 0.05 * rng.standard_normal(s)
        fun = lambda t, z: lorenz96_field(z, F)
        observed = slice(0, s // 2)
        sys_params = {"s": s, "F": F}
    else:
        raise ContractViolation(f"unknown system '{system}'")

    t_eval = dt * np.arange(transient, transient + n_steps)
    t_end = float(t_eval[-1]) if n_steps > 0 else 0.0
    sol = solve_ivp(fun, (0.0, max(t_end, dt)), ic, method="RK45",
                    rtol=1e-10, atol=1e-10, t_eval=t_eval)
    if not sol.success or not np.all(np.isfinite(sol.y)):
        raise BlowupError(f"reference integration of {system} failed",
                          stage="generate")
    states = sol.y.T
    values = states if observe == "full" else states[:, observed]
    meta = {
        "generator": system,
        "parameters": sys_params,
        "seed": seed,
        "transient": transient,
        "observation": observe,
        "split_index": int(round(_SPLIT_FRACTION * n_steps)),
    }
    return ObservationSeries(dt=dt, values=values.copy(), meta=meta)


# ---------------------------------------------------------------------------
# shallow water on a periodic C-grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SWEConfig:
    """Square periodic domain, Arakawa-C staggering, forward-backward steps.

    The desk-scale defaults (40x40, 20000 steps) exercise the same code
    path as a full-scale run; dt derives from the gravity-wave CFL bound
    with the given safety factor unless set explicitly.
    """

    nx: int = 40
    ny: int = 40
    length: float = 1.0e6          # meters, both directions
    depth: float = 100.0           # mean depth H (m)
    gravity: float = 9.81
    f0: float = 1.0e-4
    beta: float = 2.0e-11
    safety: float = 0.2
    dt: float | None = None        # seconds; derived from CFL when None
    n_steps: int = 20000
    transient: int = 2500
    patch_center: tuple | None = None   # meters; domain center when None
    patch_side: float = 0.25e6          # meters
    eof_modes: int = 8

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ContractViolation("grid must be at least 4x4")
        dx = self.length / self.nx
        bound = self.safety * dx / np.sqrt(self.gravity * self.depth)
        if self.dt is None:
            object.__setattr__(self, "dt", float(bound))
        elif self.dt > bound * (1.0 + 1e-12):
            raise ContractViolation(
                f"dt={self.dt} exceeds the CFL bound {bound}")
        if self.patch_center is None:
            object.__setattr__(self, "patch_center",
                               (0.5 * self.length, 0.5 * self.length))
        cx, cy = self.patch_center
        half = 0.5 * self.patch_side
        if not (0.0 <= cx - half and cx + half <= self.length
                and 0.0 <= cy - half and cy + half <= self.length):
            raise ContractViolation("patch extends outside the domain")
        if self.transient < 0 or self.n_steps <= self.transient:
            raise ContractViolation("need n_steps > transient >= 0")

    @property
    def dx(self) -> float:
        return self.length / self.nx

    def patch_slices(self) -> tuple[slice, slice]:
        """(row slice, column slice) of eta cells inside the patch."""
        dx = self.dx
        cx, cy = self.patch_center
        n_side = max(1, int(round(self.patch_side / dx)))
        i0 = int(round(cx / dx - 0.5 * n_side))
        j0 = int(round(cy / dx - 0.5 * n_side))
        return slice(j0, j0 + n_side), slice(i0, i0 + n_side)


def swe_initial_state(cfg: SWEConfig, seed: int) -> dict:
    """Smooth random free-surface anomaly at rest, deterministic per seed."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:cfg.ny, 0:cfg.nx].astype(float)
    eta = np.zeros((cfg.ny, cfg.nx))
    for _ in range(6):
        kx, ky = rng.integers(1, 4, size=2)
        amp = 0.15 * rng.standard_normal()
        phase = rng.uniform(0.0, 2.0 * np.pi)
        eta += amp * np.cos(2.0 * np.pi * (kx * xx / cfg.nx
                                           + ky * yy / cfg.ny) + phase)
    return {"eta": eta, "vx": np.zeros_like(eta), "vy": np.zeros_like(eta)}


def swe_step(state: dict, cfg: SWEConfig) -> dict:
    """One forward-backward step: velocities with the old surface, then the
    flux-form continuity update with the new velocities.

    Staggering: eta[j,i] at cell centers, vx on east faces, vy on north
    faces, all periodic.  The mixed Coriolis evaluation (old vy for the vx
    update, new vx for the vy update) keeps inertial oscillations neutral.
    """
    eta, vx, vy = state["eta"], state["vx"], state["vy"]
    if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(vx))
            and np.all(np.isfinite(vy))):
        raise BlowupError("non-finite shallow-water state", stage="swe_step")
    dx = cfg.dx
    dt = cfg.dt
    g = cfg.gravity

    y_vx = (np.arange(cfg.ny) + 0.5) * dx
    y_vy = (np.arange(cfg.ny) + 1.0) * dx
    f_vx = (cfg.f0 + cfg.beta * y_vx)[:, None]
    f_vy = (cfg.f0 + cfg.beta * y_vy)[:, None]

    detadx = (np.roll(eta, -1, axis=1) - eta) / dx
    vy_at_vx = 0.25 * (vy + np.roll(vy, -1, axis=1) + np.roll(vy, 1, axis=0)
                       + np.roll(np.roll(vy, -1, axis=1), 1, axis=0))
    vx_new = vx + dt * (f_vx * vy_at_vx - g * detadx)

    detady = (np.roll(eta, -1, axis=0) - eta) / dx
    vx_at_vy = 0.25 * (vx_new + np.roll(vx_new, 1, axis=1)
                       + np.roll(vx_new, -1, axis=0)
                       + np.roll(np.roll(vx_new, 1, axis=1), -1, axis=0))
    vy_new = vy + dt * (-f_vy * vx_at_vy - g * detady)

    h = eta + cfg.depth
    flux_x = 0.5 * (h + np.roll(h, -1, axis=1)) * vx_new
    flux_y = 0.5 * (h + np.roll(h, -1, axis=0)) * vy_new
    div = ((flux_x - np.roll(flux_x, 1, axis=1))
           + (flux_y - np.roll(flux_y, 1, axis=0))) / dx
    eta_new = eta - dt * div
    return {"eta": eta_new, "vx": vx_new, "vy": vy_new}


def swe_run(cfg: SWEConfig, seed: int, record_every: int = 1):
    """Integrate n_steps steps, recording eta after the transient.

    Returns (snapshots, times): snapshots[m] is the surface at step
    transient + m*record_every, times in seconds.
    """
    if record_every < 1:
        raise ContractViolation("record_every must be >= 1")
    state = swe_initial_state(cfg, seed)
    recorded = []
    times = []
    for step in range(cfg.n_steps + 1):
        if step >= cfg.transient and (step - cfg.transient) % record_every == 0:
            recorded.append(state["eta"].copy())
            times.append(step * cfg.dt)
        if step < cfg.n_steps:
            state = swe_step(state, cfg)
    return np.array(recorded), np.array(times)


# ---------------------------------------------------------------------------
# patch EOF observations
# ---------------------------------------------------------------------------

@dataclass
class EOFBasis:
    """Temporal mean and orthonormal spatial modes of a surface patch."""

    mean: np.ndarray               # (p,)
    modes: np.ndarray              # (k, p), orthonormal rows
    singular_values: np.ndarray    # (k,)
    variance_fraction: float
    patch_rows: tuple
    patch_cols: tuple

    def crop(self, snapshots: np.ndarray) -> np.ndarray:
        """(n, ny, nx) snapshots -> flattened (n, p) patch rows."""
        snaps = np.asarray(snapshots, dtype=float)
        rows = slice(*self.patch_rows)
        cols = slice(*self.patch_cols)
        return snaps[:, rows, cols].reshape(snaps.shape[0], -1)

    def project(self, patch_rows: np.ndarray) -> np.ndarray:
        return (np.asarray(patch_rows, dtype=float) - self.mean) @ self.modes.T

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        return self.mean + np.asarray(coeffs, dtype=float) @ self.modes


def extract_patch_and_eof(snapshots: np.ndarray, cfg: SWEConfig,
                          fit_count: int | None = None,
                          dt: float | None = None):
    """Crop the configured patch, fit a truncated EOF basis, and project.

    The basis (mean, modes, variance fraction) is fit on the first
    fit_count snapshots (all of them when None); coefficients are returned
    for every snapshot, so test rows are projected in the training basis.

    Returns (EOFBasis, ObservationSeries of mode coefficients).
    """
    snaps = np.asarray(snapshots, dtype=float)
    if snaps.ndim != 3:
        raise ContractViolation("snapshots must be (n, ny, nx)")
    n = snaps.shape[0]
    fit_n = n if fit_count is None else int(fit_count)
    if not (cfg.eof_modes >= 1 and fit_n >= cfg.eof_modes and fit_n <= n):
        raise ContractViolation(
            "need at least eof_modes snapshots in the fit range")

    rows, cols = cfg.patch_slices()
    X = snaps[:, rows, cols].reshape(n, -1)
    fit = X[:fit_n]
    mean = fit.mean(axis=0)
    _, s, Vt = np.linalg.svd(fit - mean, full_matrices=False)
    usable = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
    k = min(cfg.eof_modes, usable)
    if k < cfg.eof_modes:
        warnings.warn(
            f"snapshot rank {usable} below requested {cfg.eof_modes} modes;"
            f" returning {k}", stacklevel=2)
    total = float(np.sum(s ** 2))
    captured = float(np.sum(s[:k] ** 2) / total) if total > 0 else 1.0
    basis = EOFBasis(mean=mean, modes=Vt[:k].copy(),
                     singular_values=s[:k].copy(),
                     variance_fraction=captured,
                     patch_rows=(rows.start, rows.stop),
                     patch_cols=(cols.start, cols.stop))
    coeffs = (X - mean) @ basis.modes.T
    meta = {
        "generator": "swe_eof",
        "eof_modes": k,
        "variance_fraction": captured,
        "fit_count": fit_n,
        "patch_rows": [rows.start, rows.stop],
        "patch_cols": [cols.start, cols.stop],
    }
    return basis, ObservationSeries(dt=float(dt if dt is not None else cfg.dt),
                                    values=coeffs, meta=meta)
