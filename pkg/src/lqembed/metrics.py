"""Evaluation instruments for learned and reference dynamics.

Closed-loop forecast error by horizon, the largest Lyapunov exponent from
tangent propagation (needs the model) and from nearest-neighbor divergence
(needs only a series), windowed FFT modulus, radially averaged 2-D power
spectra for field snapshots, and a probe that launches trajectories far
from the training attractor and reports how many stay bounded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .embedtools import DelaySpec, hankel_embed
from .errors import BlowupError, ContractViolation
from .lqm import LQModel, eval_field
from .ode import FlowConfig, rollout_with_tangent

__all__ = [
    "HorizonRMSE",
    "horizon_rmse",
    "aggregate_horizon_rmse",
    "lyap_benettin",
    "lyap_rosenstein",
    "FFTSpectrum",
    "fft_modulus",
    "RadialPSD",
    "radial_psd",
    "ProbeReport",
    "boundedness_probe",
    "MetricsReport",
]


def _series_values(series) -> np.ndarray:
    if hasattr(series, "values") and hasattr(series, "dt"):
        return np.asarray(series.values, dtype=float)
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ContractViolation("expected a 1-d or (N, channels) series")
    return arr


# ---------------------------------------------------------------------------
# forecast RMSE by horizon
# ---------------------------------------------------------------------------

@dataclass
class HorizonRMSE:
    """Closed-loop RMSE per horizon for one forecaster over many starts.

    Starts whose prediction is non-finite at a horizon are excluded from
    that horizon's mean and counted in ``blowup_counts`` instead.
    """

    horizons: tuple
    rmse: dict
    blowup_counts: dict
    n_starts: int
    starts: np.ndarray


def horizon_rmse(truth, forecaster, horizons, n_starts: int,
                 min_history: int = 1) -> HorizonRMSE:
    """Forecast from up to n_starts evenly spaced history cuts and report
    the RMSE against the truth at each requested horizon.

    The forecaster is called as ``forecaster(history, max_horizon)`` with
    ``history`` the truth rows up to and including the start index, and
    must return a (max_horizon, channels) array.
    """
    values = _series_values(truth)
    horizons = tuple(sorted(set(int(h) for h in horizons)))
    if not horizons:
        raise ContractViolation("need at least one horizon")
    if horizons[0] < 1:
        raise ContractViolation("horizons must be >= 1")
    if n_starts < 1:
        raise ContractViolation("n_starts must be >= 1")
    if min_history < 1:
        raise ContractViolation("min_history must be >= 1")
    n, width = values.shape
    h_max = horizons[-1]
    candidates = np.arange(min_history - 1, n - h_max)
    if candidates.size == 0:
        raise ContractViolation(
            f"series of length {n} leaves no start with history "
            f">= {min_history} and horizon {h_max}")
    if n_starts >= candidates.size:
        starts = candidates
    else:
        pick = np.unique(np.round(
            np.linspace(0, candidates.size - 1, n_starts)).astype(int))
        starts = candidates[pick]

    sq = {h: [] for h in horizons}
    blowups = {h: 0 for h in horizons}
    for t in starts:
        pred = np.asarray(forecaster(values[:t + 1], h_max), dtype=float)
        if pred.shape != (h_max, width):
            raise ContractViolation(
                f"forecaster returned shape {pred.shape}, "
                f"expected {(h_max, width)}")
        for h in horizons:
            row = pred[h - 1]
            if np.all(np.isfinite(row)):
                sq[h].append(float(np.mean((row - values[t + h]) ** 2)))
            else:
                blowups[h] += 1
    rmse = {h: (float(np.sqrt(np.mean(sq[h]))) if sq[h] else np.inf)
            for h in horizons}
    return HorizonRMSE(horizons=horizons, rmse=rmse, blowup_counts=blowups,
                       n_starts=len(starts), starts=starts)


def aggregate_horizon_rmse(runs) -> dict:
    """Per-horizon (mean, std) over independent runs (e.g. training seeds)."""
    runs = list(runs)
    if not runs:
        raise ContractViolation("need at least one run to aggregate")
    horizons = runs[0].horizons
    for run in runs[1:]:
        if run.horizons != horizons:
            raise ContractViolation("runs report different horizons")
    out = {}
    for h in horizons:
        vals = np.array([run.rmse[h] for run in runs])
        out[h] = (float(vals.mean()), float(vals.std()))
    return out


# ---------------------------------------------------------------------------
# largest Lyapunov exponent
# ---------------------------------------------------------------------------

def lyap_benettin(model: LQModel, u0, n_steps: int, dt: float,
                  substeps: int = 1, basis=None,
                  warmup_fraction: float = 0.1) -> float:
    """Leading exponent from tangent propagation with per-step
    renormalization; the first warmup_fraction of the log-stretches is
    discarded so the tangent vector can align with the leading direction.
    """
    if n_steps < 1:
        raise ContractViolation("n_steps must be >= 1")
    if not 0.0 <= warmup_fraction < 1.0:
        raise ContractViolation("warmup_fraction must be in [0, 1)")
    if basis is not None:
        v = np.asarray(basis, dtype=float).reshape(-1)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ContractViolation("start vector must be nonzero")
        basis = (v / norm)[:, None]
    traj, logs, h = rollout_with_tangent(model, np.asarray(u0, dtype=float),
                                         n_steps, FlowConfig(dt, substeps),
                                         basis)
    if traj.blowup:
        raise BlowupError("trajectory diverged during exponent estimation",
                          stage="lyap_benettin")
    stretches = logs[:, 0]
    skip = int(round(warmup_fraction * len(stretches)))
    kept = stretches[skip:]
    if kept.size == 0:
        raise ContractViolation("warmup discards every step")
    return float(np.mean(kept) / h)


def _mean_period_samples(x: np.ndarray) -> float:
    """Mean period from the power-weighted mean frequency of the series."""
    xc = x - x.mean()
    power = np.abs(np.fft.rfft(xc)) ** 2
    total = float(power.sum())
    if total <= 0.0:
        raise ContractViolation("constant series has no period")
    fbar = float(np.fft.rfftfreq(len(x)) @ power) / total
    if fbar <= 0.0:
        raise ContractViolation("degenerate spectrum, no mean frequency")
    return 1.0 / fbar


def lyap_rosenstein(series, spec: DelaySpec, dt: float, k_max=None,
                    theiler=None, fit_offset=None,
                    fit_fraction: float = 1.0 / 3.0,
                    r2_floor: float = 0.9) -> float:
    """Largest exponent from the mean log divergence of nearest-neighbor
    pairs in delay coordinates.

    Neighbors closer in time than one mean period are excluded.  The
    automatic fit region skips the first mean period of the curve (pairs
    are selected at their closest approach, so the first stretch regresses
    upward far more steeply than the true rate) and then covers the first
    fit_fraction of what remains.  The estimate is flagged with a warning
    when that fit has R^2 below r2_floor (noise-dominated or flat curves).
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ContractViolation("series must be finite")
    E = hankel_embed(x, spec)
    m_rows = E.shape[0]
    if theiler is None:
        theiler = int(np.ceil(_mean_period_samples(x)))
    theiler = max(int(theiler), 1)
    if k_max is None:
        k_max = max(50, 3 * theiler)
    k_max = int(min(k_max, m_rows - 2))
    base = m_rows - k_max           # pairs must survive the whole window
    if k_max < 3 or base < 10:
        raise ContractViolation("series too short for divergence statistics")

    scale = float(x.std())
    tree = cKDTree(E[:base])
    k_query = int(min(base, 2 * theiler + 3))
    dist, idx = tree.query(E[:base], k=k_query)
    ii, jj = [], []
    for i in range(base):
        row = idx[i]
        ok = (np.abs(row - i) > theiler) & (dist[i] > 1e-9 * scale)
        hit = np.flatnonzero(ok)
        if hit.size:
            ii.append(i)
            jj.append(row[hit[0]])
        else:
            # every queried neighbor was temporal: fall back to brute force
            d_all = np.linalg.norm(E[:base] - E[i], axis=1)
            d_all[max(0, i - theiler):i + theiler + 1] = np.inf
            d_all[d_all <= 1e-9 * scale] = np.inf
            j = int(np.argmin(d_all))
            if np.isfinite(d_all[j]):
                ii.append(i)
                jj.append(j)
    if len(ii) < 10:
        raise ContractViolation("not enough valid neighbor pairs")
    ii = np.asarray(ii)
    jj = np.asarray(jj)

    curve = np.empty(k_max + 1)
    for k in range(k_max + 1):
        d = np.linalg.norm(E[ii + k] - E[jj + k], axis=1)
        d = d[d > 0.0]
        curve[k] = np.mean(np.log(d)) if d.size else np.nan

    if fit_offset is None:
        fit_offset = min(theiler, k_max // 3)
    fit_offset = int(fit_offset)
    if not 0 <= fit_offset < k_max - 1:
        raise ContractViolation("fit_offset must leave room for the fit")
    m_fit = fit_offset + max(2, int(round((k_max - fit_offset)
                                          * fit_fraction)))
    ks = np.arange(fit_offset, m_fit + 1)
    seg = curve[fit_offset:m_fit + 1]
    good = np.isfinite(seg)
    if good.sum() < 3:
        raise ContractViolation("divergence curve degenerate over fit region")
    t_axis = ks[good] * dt
    y = seg[good]
    slope, intercept = np.polyfit(t_axis, y, 1)
    resid = y - (slope * t_axis + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    if r2 < r2_floor:
        warnings.warn(f"divergence fit unreliable (R^2 = {r2:.3f})",
                      stacklevel=2)
    return float(slope)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass
class FFTSpectrum:
    """One-sided modulus spectrum; frequencies in cycles per time unit."""

    frequencies: np.ndarray
    modulus: np.ndarray            # averaged over channels and runs
    per_channel: np.ndarray        # (n_freq, channels), averaged over runs

    def __post_init__(self):
        if np.any(np.diff(self.frequencies) <= 0):
            raise ContractViolation("frequency grid must be ascending")
        if np.any(self.modulus < 0) or np.any(self.per_channel < 0):
            raise ContractViolation("moduli must be nonnegative")
        if self.per_channel.shape[0] != len(self.frequencies):
            raise ContractViolation("per-channel rows must match frequencies")


MIN_FFT_LENGTH = 64


def fft_modulus(series, dt: float | None = None) -> FFTSpectrum:
    """Mean one-sided FFT modulus after mean removal and a periodic Hann
    window, averaged over channels and over the supplied runs.

    Accepts a single series (array or recorded series with its own dt) or
    a list of runs sharing length, channel count, and dt.
    """
    runs = series if isinstance(series, (list, tuple)) else [series]
    if not runs:
        raise ContractViolation("need at least one run")
    arrays = []
    for item in runs:
        if hasattr(item, "values") and hasattr(item, "dt"):
            if dt is None:
                dt = float(item.dt)
            elif abs(float(item.dt) - dt) > 1e-12 * dt:
                raise ContractViolation("runs disagree on dt")
            arrays.append(np.asarray(item.values, dtype=float))
        else:
            arrays.append(_series_values(item))
    if dt is None or not dt > 0:
        raise ContractViolation("a positive dt is required")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ContractViolation("all runs must share length and channels")
    n = shape[0]
    if n < MIN_FFT_LENGTH:
        raise ContractViolation(f"need at least {MIN_FFT_LENGTH} samples")
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
    acc = np.zeros((n // 2 + 1, shape[1]))
    for a in arrays:
        xw = window[:, None] * (a - a.mean(axis=0))
        acc += np.abs(np.fft.rfft(xw, axis=0))
    per_channel = acc / len(arrays)
    return FFTSpectrum(frequencies=np.fft.rfftfreq(n, d=dt),
                       modulus=per_channel.mean(axis=1),
                       per_channel=per_channel)


@dataclass
class RadialPSD:
    """2-D FFT power summed in integer radial wavenumber rings and
    averaged over snapshots; counts holds the ring populations."""

    wavenumbers: np.ndarray
    power: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if np.any(self.power < 0):
            raise ContractViolation("power must be nonnegative")
        if len(self.power) != len(self.wavenumbers) \
                or len(self.counts) != len(self.wavenumbers):
            raise ContractViolation("grid, power, counts must align")


def radial_psd(fields) -> RadialPSD:
    """Time-averaged radially binned power spectrum of square snapshots.

    Binning partitions the 2-D modes, so the spectrum sums exactly to the
    time-averaged total 2-D power.
    """
    arr = np.asarray(fields, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractViolation("expected (time, nx, ny) snapshots")
    n = arr.shape[1]
    if arr.shape[2] != n:
        raise ContractViolation(f"fields must be square, got {arr.shape[1:]}")
    if n < 2:
        raise ContractViolation("fields must be at least 2x2")
    k = np.rint(np.fft.fftfreq(n) * n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    rings = np.rint(np.sqrt(kx ** 2 + ky ** 2)).astype(int).ravel()
    n_bins = int(rings.max()) + 1
    counts = np.bincount(rings, minlength=n_bins)
    power = np.zeros(n_bins)
    for snap in arr:
        p2 = np.abs(np.fft.fft2(snap)) ** 2
        power += np.bincount(rings, weights=p2.ravel(), minlength=n_bins)
    power /= arr.shape[0]
    return RadialPSD(wavenumbers=np.arange(n_bins), power=power,
                     counts=counts)


# ---------------------------------------------------------------------------
# boundedness probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    """Outcome of launching trajectories on a far sphere around the
    training states' centroid."""

    fraction_bounded: float
    max_distance: float
    radius: float
    centroid: np.ndarray
    n_trials: int
    scale: float
    escapes: int
    per_trial_max: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.fraction_bounded <= 1.0:
            raise ContractViolation("bounded fraction must lie in [0, 1]")
        if self.radius < 0:
            raise ContractViolation("radius must be nonnegative")
        if self.n_trials < 1:
            raise ContractViolation("n_trials must be >= 1")


def boundedness_probe(model: LQModel, states, dt: float,
                      n_trials: int = 100, scale: float = 5.0,
                      n_steps: int = 10000, substeps: int = 1,
                      seed: int = 0, bound_factor: float = 10.0) -> ProbeReport:
    """Sample initial conditions uniformly on the sphere of radius
    scale x (attractor radius) around the training centroid, roll each
    out, and report the fraction that stay within bound_factor radii.

    The attractor radius is the largest distance of any supplied training
    state from the centroid; blowups are the measurement, not an error.
    """
    pts = np.asarray(states, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != model.dim:
        raise ContractViolation(
            f"states must be (n, {model.dim}), got {pts.shape}")
    if n_trials < 1:
        raise ContractViolation("n_trials must be >= 1")
    if scale < 0:
        raise ContractViolation("scale must be nonnegative")
    if n_steps < 1 or substeps < 1:
        raise ContractViolation("n_steps and substeps must be >= 1")
    centroid = pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pts - centroid, axis=1)))
    if radius == 0.0:
        raise ContractViolation("training states are degenerate (radius 0)")
    bound = bound_factor * radius

    rng = np.random.default_rng(seed)
    d = model.dim
    dirs = rng.standard_normal((n_trials, d))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    U = centroid + scale * radius * dirs / norms

    alive = np.ones(n_trials, dtype=bool)
    per_trial_max = np.linalg.norm(U - centroid, axis=1)
    h = dt / substeps
    half = 0.5 * h
    for _ in range(n_steps * substeps):
        if not np.any(alive):
            break
        Ua = U[alive]
        with np.errstate(all="ignore"):
            k1 = eval_field(model, Ua)
            k2 = eval_field(model, Ua + half * k1)
            k3 = eval_field(model, Ua + half * k2)
            k4 = eval_field(model, Ua + h * k3)
            Ua = Ua + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            dist = np.linalg.norm(Ua - centroid, axis=1)
        finite = np.all(np.isfinite(Ua), axis=1) & np.isfinite(dist)
        ok = finite & (dist <= bound)
        rows = np.flatnonzero(alive)
        # escaped rows keep their last distance (inf for non-finite states)
        esc = rows[~ok]
        esc_dist = np.where(finite[~ok], dist[~ok], np.inf)
        per_trial_max[esc] = np.maximum(per_trial_max[esc], esc_dist)
        alive[esc] = False
        keep = rows[ok]
        U[keep] = Ua[ok]
        per_trial_max[keep] = np.maximum(per_trial_max[keep], dist[ok])
    escapes = int(n_trials - alive.sum())
    return ProbeReport(fraction_bounded=float(alive.mean()),
                       max_distance=float(np.max(per_trial_max)),
                       radius=radius, centroid=centroid, n_trials=n_trials,
                       scale=float(scale), escapes=escapes,
                       per_trial_max=per_trial_max)


# ---------------------------------------------------------------------------
# combined report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Bundle of whichever evaluation results were computed; all fields
    optional so partial evaluations still serialize."""

    rmse_by_horizon: dict | None = None        # horizon -> (mean, std)
    rmse_blowups: dict | None = None
    lyap_benettin: tuple | None = None         # (value, std)
    lyap_rosenstein: tuple | None = None
    fft: FFTSpectrum | None = None
    radial: RadialPSD | None = None
    boundedness: ProbeReport | None = None

    def __post_init__(self):
        if self.rmse_by_horizon is not None:
            for h, (mean, std) in self.rmse_by_horizon.items():
                if mean < 0 or std < 0:
                    raise ContractViolation(
                        f"RMSE at horizon {h} must be nonnegative")
        for name in ("lyap_benettin", "lyap_rosenstein"):
            pair = getattr(self, name)
            if pair is not None:
                if len(pair) != 2 or pair[1] < 0:
                    raise ContractViolation(
                        f"{name} must be (value, nonnegative std)")

    def to_text(self) -> str:
        lines = ["evaluation report", "================="]
        if self.rmse_by_horizon is not None:
            lines.append("forecast RMSE by horizon (mean +/- std over runs):")
            for h in sorted(self.rmse_by_horizon):
                mean, std = self.rmse_by_horizon[h]
                extra = ""
                if self.rmse_blowups and self.rmse_blowups.get(h):
                    extra = f"   [blowups: {self.rmse_blowups[h]}]"
                lines.append(f"  horizon {h}: {mean:.6g} +/- {std:.3g}{extra}")
        if self.lyap_benettin is not None:
            lines.append(f"largest exponent, tangent propagation: "
                         f"{self.lyap_benettin[0]:.6g} "
                         f"+/- {self.lyap_benettin[1]:.3g}")
        if self.lyap_rosenstein is not None:
            lines.append(f"largest exponent, neighbor divergence: "
                         f"{self.lyap_rosenstein[0]:.6g} "
                         f"+/- {self.lyap_rosenstein[1]:.3g}")
        if self.fft is not None:
            lines.append(f"FFT modulus: {len(self.fft.frequencies)} bins up "
                         f"to {self.fft.frequencies[-1]:.6g} cycles/time")
        if self.radial is not None:
            lines.append(f"radial PSD: {len(self.radial.wavenumbers)} "
                         f"wavenumber rings")
        if self.boundedness is not None:
            b = self.boundedness
            lines.append(f"boundedness probe: fraction bounded "
                         f"{b.fraction_bounded:.3g} over {b.n_trials} trials "
                         f"at scale {b.scale:g} (max distance "
                         f"{b.max_distance:.6g}, attractor radius "
                         f"{b.radius:.6g})")
        return "\n".join(lines) + "\n"

    def save(self, directory) -> None:
        """metrics.txt plus CSV spectra (freq,modulus / k,power) when present."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.txt").write_text(self.to_text(),
                                               encoding="ascii")
        if self.fft is not None:
            data = np.column_stack([self.fft.frequencies, self.fft.modulus])
            np.savetxt(directory / "fft_modulus.csv", data, delimiter=",",
                       header="freq,modulus", comments="", fmt="%.17g")
        if self.radial is not None:
            data = np.column_stack([self.radial.wavenumbers,
                                    self.radial.power])
            np.savetxt(directory / "radial_psd.csv", data, delimiter=",",
                       header="k,power", comments="", fmt="%.17g")
