"""Joint training of model parameters and latent states.

The trainer treats every latent row as a free variable alongside the model
coefficients and runs full-batch Adam on the concatenated vector, using the
exact reverse-mode gradients from :mod:`lqembed.grad`.  Constrained mode
adds the energy-neutrality and negative-spectrum penalties and tracks the
best feasible iterate so the returned model satisfies the bounds whenever
any visited iterate did.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field as dc_field, fields as dc_fields
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .grad import GradientBundle, LossSetup, grad_total_loss
from .lqm import LQModel, build_shifted, energy_residual, load_model, \
    make_quad, save_model
from .ode import FlowConfig, rollout
from .systems import ObservationSeries

__all__ = [
    "LatentTable",
    "TrainConfig",
    "TrainReport",
    "assemble_augmented",
    "init_latent",
    "train",
    "estimate_initial_latent",
    "forecast",
    "pack_params",
    "unpack_params",
    "config_to_dict",
    "config_from_dict",
    "save_checkpoint",
    "load_checkpoint",
]

FEASIBLE_ENERGY = 1e-6      # residual bound for a "constraints met" iterate


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class LatentTable:
    """One latent vector per training index; width d_E - r (may be zero)."""

    entries: np.ndarray
    r: int

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2:
            raise ContractViolation("latent entries must be (N, d_E - r)")
        if not np.all(np.isfinite(self.entries)):
            raise ContractViolation("latent entries must be finite")
        if self.r < 1:
            raise ContractViolation("observed dimension r must be >= 1")

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Dimensions, loss weights, optimizer scalars, and plumbing knobs."""

    d_E: int
    r: int
    lambda1: float = 1.0
    lambda2: float = 1e3
    lambda3: float = 1e3
    mode: str = "unconstrained"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 2000
    chunk_length: int = 512
    seed: int = 0
    latent_init_std: float = 1e-2
    assimilation_window: int = 10
    assimilation_iters: int = 200
    substeps: int = 1
    structure: dict | None = None     # quadratic-term structure; dense if None

    def __post_init__(self):
        # d_E == r is the fully observed degenerate case (empty latent part)
        if not (self.d_E >= self.r >= 1):
            raise ContractViolation(
                f"need d_E >= r >= 1, got d_E={self.d_E}, r={self.r}")
        if self.mode not in ("unconstrained", "constrained"):
            raise ContractViolation(f"unknown mode '{self.mode}'")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ContractViolation("loss weights must be nonnegative")
        if self.mode == "constrained" and not (self.lambda2 > 0
                                               and self.lambda3 > 0):
            raise ContractViolation(
                "constrained mode requires lambda2, lambda3 > 0")
        if self.epochs < 0 or self.chunk_length < 1:
            raise ContractViolation("bad epochs or chunk_length")
        if self.latent_init_std < 0:
            raise ContractViolation("latent_init_std must be >= 0")
        if self.assimilation_window < 2 or self.assimilation_iters < 0:
            raise ContractViolation("bad assimilation settings")
        if self.structure is not None:
            make_quad(self.d_E, self.structure)   # validates eagerly

    @property
    def constrained(self) -> bool:
        return self.mode == "constrained"

    def loss_setup(self, dt: float) -> LossSetup:
        return LossSetup(r=self.r, dt=dt, substeps=self.substeps,
                         lambda1=self.lambda1, lambda2=self.lambda2,
                         lambda3=self.lambda3, constrained=self.constrained,
                         chunk_length=self.chunk_length)


@dataclass
class TrainReport:
    """Loss decomposition per epoch plus the final spectrum and run flags.

    history arrays have epochs + 1 entries: entry k is evaluated at the
    parameters before update k, the last entry at the returned parameters.
    """

    seed: int
    mode: str
    epochs: int
    history: dict = dc_field(default_factory=dict)
    final_eigenvalues: np.ndarray | None = None
    final_energy_residual: float = 0.0
    wall_clock: float = 0.0
    best_epoch: int = -1
    constraints_unmet: bool = False
    aborted: bool = False

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "mode": self.mode,
            "epochs": self.epochs,
            "history": {k: [float(v) for v in vals]
                        for k, vals in self.history.items()},
            "final_eigenvalues": (None if self.final_eigenvalues is None
                                  else [float(v)
                                        for v in self.final_eigenvalues]),
            "final_energy_residual": float(self.final_energy_residual),
            "wall_clock": float(self.wall_clock),
            "best_epoch": self.best_epoch,
            "constraints_unmet": self.constraints_unmet,
            "aborted": self.aborted,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        rep = cls(seed=d["seed"], mode=d["mode"], epochs=d["epochs"])
        rep.history = {k: np.asarray(v, dtype=float)
                       for k, v in d["history"].items()}
        if d.get("final_eigenvalues") is not None:
            rep.final_eigenvalues = np.asarray(d["final_eigenvalues"])
        rep.final_energy_residual = d.get("final_energy_residual", 0.0)
        rep.wall_clock = d.get("wall_clock", 0.0)
        rep.best_epoch = d.get("best_epoch", -1)
        rep.constraints_unmet = d.get("constraints_unmet", False)
        rep.aborted = d.get("aborted", False)
        return rep


# ---------------------------------------------------------------------------
# assembly and initialization
# ---------------------------------------------------------------------------

def _series_values(observations) -> np.ndarray:
    if isinstance(observations, ObservationSeries):
        return observations.values
    return np.asarray(observations, dtype=float)


def assemble_augmented(observations, projector, table: LatentTable) -> np.ndarray:
    """Concatenate projected observation rows with latent rows.

    projector: None for identity, an (r, n) matrix, or a callable mapping
    the (N, n) observation block to (N, r).
    """
    obs = _series_values(observations)
    if obs.ndim != 2:
        raise ContractViolation("observations must be two-dimensional")
    if projector is None:
        proj = obs
    elif callable(projector):
        proj = np.asarray(projector(obs), dtype=float)
    else:
        proj = obs @ np.asarray(projector, dtype=float).T
    if proj.shape[1] != table.r:
        raise ContractViolation(
            f"projected width {proj.shape[1]} != table r {table.r}")
    if proj.shape[0] != table.n_entries:
        raise ContractViolation(
            f"{proj.shape[0]} observations vs {table.n_entries} latent rows")
    return np.concatenate([proj, table.entries], axis=1)


def init_latent(observations, cfg: TrainConfig,
                seed: int | None = None) -> LatentTable:
    """Zero-mean Gaussian latent rows, std latent_init_std, per-seed."""
    n = _series_values(observations).shape[0]
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    entries = cfg.latent_init_std * rng.standard_normal((n, cfg.d_E - cfg.r))
    return LatentTable(entries=entries, r=cfg.r)


# ---------------------------------------------------------------------------
# flat parameter vector (model blocks + latent table)
# ---------------------------------------------------------------------------

def pack_params(model: LQModel, latent_entries: np.ndarray) -> np.ndarray:
    return np.concatenate([model.c, model.L.reshape(-1),
                           model.quad.get_flat(), model.m,
                           np.asarray(latent_entries, dtype=float).reshape(-1)])


def unpack_params(flat: np.ndarray, model: LQModel,
                  latent_shape: tuple) -> np.ndarray:
    """Write a flat vector back into the model blocks; returns the latent
    entries view reshaped to latent_shape."""
    d = model.dim
    k = 0
    model.c = flat[k:k + d].copy(); k += d
    model.L = flat[k:k + d * d].reshape(d, d).copy(); k += d * d
    nq = model.quad.n_params
    model.quad.set_flat(flat[k:k + nq]); k += nq
    model.m = flat[k:k + d].copy(); k += d
    entries = flat[k:].reshape(latent_shape).copy()
    return entries


def _flatten_bundle(bundle: GradientBundle) -> np.ndarray:
    parts = [bundle.d_c, bundle.d_L.reshape(-1), bundle.d_q, bundle.d_m]
    if bundle.d_latent is not None:
        parts.append(bundle.d_latent.reshape(-1))
    return np.concatenate(parts)


class _Adam:
    """Plain Adam with bias correction; state arrays match the flat vector."""

    def __init__(self, size: int, lr: float, beta1: float, beta2: float,
                 epsilon: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, epsilon
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1 ** self.t)
        vhat = self.v / (1.0 - self.b2 ** self.t)
        return flat - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _is_feasible(info) -> bool:
    return (info.eigenvalues is not None
            and float(info.eigenvalues[-1]) < 0.0
            and info.energy <= FEASIBLE_ENERGY)


def train(observations: ObservationSeries, cfg: TrainConfig,
          init_model: LQModel | None = None,
          init_table: LatentTable | None = None):
    """Full-batch Adam on the concatenated (model, latent) vector.

    Returns (LQModel, LatentTable, TrainReport).  Constrained mode returns
    the best feasible iterate (all shifted-symmetric eigenvalues negative,
    energy residual <= 1e-6) when one was visited, otherwise the final
    iterate with report.constraints_unmet set.  A non-finite loss aborts
    and returns the last finite iterate with report.aborted set.
    """
    if not isinstance(observations, ObservationSeries):
        raise ContractViolation("train expects an ObservationSeries")
    obs = observations.values
    if obs.shape[0] < 2:
        raise ContractViolation("need at least two observations")
    if obs.shape[1] != cfg.r:
        raise ContractViolation(
            f"observation width {obs.shape[1]} != configured r {cfg.r}")

    t_start = time.perf_counter()
    structure = cfg.structure or {"kind": "dense"}
    if init_model is None:
        model = LQModel.zeros(cfg.d_E, structure)
        model.m = np.concatenate([obs.mean(axis=0),
                                  np.zeros(cfg.d_E - cfg.r)])
    else:
        if init_model.dim != cfg.d_E:
            raise ContractViolation("init_model dimension != d_E")
        model = init_model.copy()
    table = init_latent(observations, cfg) if init_table is None else table_copy(init_table)
    if table.width != cfg.d_E - cfg.r or table.n_entries != obs.shape[0]:
        raise ContractViolation("latent table shape does not match config")

    setup = cfg.loss_setup(observations.dt)
    latent_shape = table.entries.shape
    flat = pack_params(model, table.entries)
    opt = _Adam(flat.size, cfg.learning_rate, cfg.beta1, cfg.beta2,
                cfg.epsilon)

    hist = {k: np.zeros(cfg.epochs + 1)
            for k in ("total", "forecast", "consistency", "energy",
                      "eig_penalty")}
    report = TrainReport(seed=cfg.seed, mode=cfg.mode, epochs=cfg.epochs)
    warm = None
    last_finite = flat.copy()
    best_flat = flat.copy()
    best_loss = np.inf
    best_feasible = False
    best_epoch = -1

    def evaluate(vec):
        entries = unpack_params(vec, model, latent_shape)
        with np.errstate(all="ignore"):
            return grad_total_loss(model, entries, obs, setup,
                                   warm_start=warm)

    n_evals = cfg.epochs + 1
    for epoch in range(n_evals):
        loss, bundle, info = evaluate(flat)
        finite = np.isfinite(loss) and bundle.all_finite()
        if not finite:
            report.aborted = True
            flat = last_finite
            # rewrite truncated history so loss terms stay well defined
            for key in hist:
                hist[key] = hist[key][:epoch]
            break
        warm = info.eigenvectors
        hist["total"][epoch] = loss
        hist["forecast"][epoch] = info.forecast
        hist["consistency"][epoch] = info.consistency
        hist["energy"][epoch] = info.energy
        hist["eig_penalty"][epoch] = info.eig_penalty
        last_finite = flat.copy()

        feasible = _is_feasible(info) if cfg.constrained else True
        better = (loss < best_loss if feasible == best_feasible
                  else feasible and not best_feasible)
        if better:
            best_flat = flat.copy()
            best_loss = loss
            best_feasible = feasible
            best_epoch = epoch
        if epoch == cfg.epochs:
            break
        with np.errstate(all="ignore"):
            flat = opt.step(flat, _flatten_bundle(bundle))

    if cfg.constrained and not report.aborted:
        if best_feasible:
            flat = best_flat
        else:
            report.constraints_unmet = True
    report.best_epoch = best_epoch

    entries = unpack_params(flat, model, latent_shape)
    table = LatentTable(entries=entries, r=cfg.r)
    final_sys = build_shifted(model)
    report.final_eigenvalues = final_sys.eigenvalues.copy()
    report.final_energy_residual = energy_residual(model.quad)
    if cfg.constrained and not report.constraints_unmet \
            and not report.aborted:
        if not (float(final_sys.eigenvalues[-1]) < 0.0
                and report.final_energy_residual <= FEASIBLE_ENERGY):
            report.constraints_unmet = True
    report.history = hist
    report.wall_clock = time.perf_counter() - t_start
    return model, table, report


def table_copy(table: LatentTable) -> LatentTable:
    return LatentTable(entries=table.entries.copy(), r=table.r)


# ---------------------------------------------------------------------------
# test-time latent estimation and forecasting
# ---------------------------------------------------------------------------

def estimate_initial_latent(model: LQModel, observations, cfg: TrainConfig,
                            projector=None) -> np.ndarray:
    """Estimate the latent part of the first window state, model frozen.

    Runs Adam on the window's latent rows only, minimizing the one-step
    forecast error plus lambda1 times the state-consistency error.  The
    consistency term is what identifies the latent rows: with r observed
    components and d_E - r latent ones, forecast errors alone give r
    equations per row and leave the window underdetermined.

    Returns the first latent row (length d_E - r; empty when d_E == r).
    A non-finite inner loss stops the iteration with a warning and the
    best iterate so far is used.
    """
    obs = _series_values(observations)
    if projector is not None:
        obs = (np.asarray(projector(obs), dtype=float) if callable(projector)
               else obs @ np.asarray(projector, dtype=float).T)
    if obs.ndim != 2 or obs.shape[1] != cfg.r:
        raise ContractViolation(
            f"window must be (assimilation_window, {cfg.r})")
    if obs.shape[0] != cfg.assimilation_window:
        raise ContractViolation(
            f"window length {obs.shape[0]} != "
            f"assimilation_window {cfg.assimilation_window}")
    width = cfg.d_E - cfg.r
    if width == 0:
        return np.zeros(0)

    if not isinstance(observations, ObservationSeries):
        raise ContractViolation(
            "estimate_initial_latent needs an ObservationSeries (for dt)")
    # penalties act on frozen parameters only, so their weights are zeroed;
    # the mode is kept so the decode shift matches the training objective
    setup = LossSetup(r=cfg.r, dt=observations.dt, substeps=cfg.substeps,
                      lambda1=cfg.lambda1, lambda2=0.0, lambda3=0.0,
                      constrained=cfg.constrained,
                      chunk_length=cfg.chunk_length)

    Y = np.zeros((cfg.assimilation_window, width))
    if cfg.assimilation_iters == 0:
        return Y[0]
    opt = _Adam(Y.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    best = Y.copy()
    best_loss = np.inf
    for _ in range(cfg.assimilation_iters):
        with np.errstate(all="ignore"):
            loss, bundle, _ = grad_total_loss(model, Y, obs, setup)
        if not (np.isfinite(loss) and bundle.all_finite()):
            warnings.warn("latent estimation diverged; returning the best "
                          "iterate", stacklevel=2)
            return best[0]
        if loss < best_loss:
            best_loss = loss
            best = Y.copy()
        with np.errstate(all="ignore"):
            Y = opt.step(Y.reshape(-1), bundle.d_latent.reshape(-1)) \
                .reshape(Y.shape)
    with np.errstate(all="ignore"):
        loss, _, _ = grad_total_loss(model, Y, obs, setup)
    if np.isfinite(loss) and loss < best_loss:
        best = Y
    return best[0]


def forecast(model: LQModel, u0: np.ndarray, horizon: int, r: int,
             dt: float, substeps: int = 1, constrained: bool = False,
             inverse=None) -> ObservationSeries:
    """Closed-loop rollout then decode to observation space.

    The decode extracts the first r components, adding the shift point's
    observed part first in constrained mode; `inverse`, when given, maps
    decoded rows back to the raw observation space (e.g. an EOF
    reconstruction).  A blowup truncates the series and is flagged in meta.
    """
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    if not (1 <= r <= model.dim):
        raise ContractViolation("need 1 <= r <= model dimension")
    traj = rollout(model, u0, horizon, FlowConfig(dt=dt, substeps=substeps))
    decoded = traj.states[1:, :r].copy()
    if constrained:
        decoded += model.m[:r]
    if inverse is not None:
        decoded = np.asarray(inverse(decoded), dtype=float)
    meta = {
        "generator": "forecast",
        "horizon": horizon,
        "blowup": traj.blowup,
        "blowup_index": traj.blowup_index,
        "constrained": constrained,
    }
    return ObservationSeries(dt=dt, values=decoded, meta=meta)


# ---------------------------------------------------------------------------
# config and checkpoint serialization
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {f.name for f in dc_fields(TrainConfig)}


def config_to_dict(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dc_fields(TrainConfig)}


def config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise ContractViolation(
            f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**data)


def save_checkpoint(directory, model: LQModel, table: LatentTable,
                    report: TrainReport, cfg: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(model, directory / "model.json")
    header = ",".join(f"y_{i}" for i in range(table.width))
    # width-0 tables still record their row count, one empty line per row
    np.savetxt(directory / "latent.csv", table.entries, delimiter=",",
               header=header, comments="", fmt="%.17g")
    (directory / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2))
    (directory / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2))


def load_checkpoint(directory):
    directory = Path(directory)
    model = load_model(directory / "model.json")
    cfg = config_from_dict(json.loads((directory / "config.json").read_text()))
    width = cfg.d_E - cfg.r
    if width == 0:
        # width-0 rows serialize as empty lines, which loadtxt would drop
        n_rows = len((directory / "latent.csv").read_text().splitlines()) - 1
        entries = np.zeros((n_rows, 0))
    else:
        entries = np.loadtxt(directory / "latent.csv", delimiter=",",
                             skiprows=1, ndmin=2)
        entries = entries.reshape(-1, width)
    table = LatentTable(entries=entries, r=cfg.r)
    report = TrainReport.from_dict(
        json.loads((directory / "report.json").read_text()))
    return model, table, report, cfg
