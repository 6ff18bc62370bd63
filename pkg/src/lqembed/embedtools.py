"""Delay-embedding parameter selection and the delay-space linear baseline.

Lag selection offers the two classical estimators (first local minimum of
the lagged mutual information, first 1/e crossing of the autocorrelation),
dimension selection the false-nearest-neighbor sweep and the topological
2p+1 bound.  The linear baseline fits a one-step operator to truncated-SVD
coordinates of the Hankel matrix and forecasts by iterating it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation

__all__ = [
    "DelaySpec",
    "EDMDModel",
    "mutual_information_curve",
    "lag_mutual_information",
    "lag_autocorrelation",
    "fnn_dimension",
    "whitney_dimension",
    "hankel_embed",
    "fit_delay_edmd",
    "edmd_forecast",
    "save_edmd",
    "load_edmd",
]


@dataclass(frozen=True)
class DelaySpec:
    """Delay-vector recipe: lag in samples and number of stacked lags."""

    lag: int
    dim: int

    def __post_init__(self):
        if not (isinstance(self.lag, (int, np.integer)) and self.lag >= 1):
            raise ContractViolation(f"lag must be a positive int, got {self.lag}")
        if not (isinstance(self.dim, (int, np.integer)) and self.dim >= 1):
            raise ContractViolation(f"dim must be a positive int, got {self.dim}")


def _scalar_series(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 1:
        raise ContractViolation("expected a scalar (1-d) series")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("series must be finite")
    return x


# ---------------------------------------------------------------------------
# lag selection
# ---------------------------------------------------------------------------

def mutual_information_curve(series, tau_max: int = 100,
                             bins: int = 32) -> np.ndarray:
    """Histogram mutual information I(x_t; x_{t+tau}) in nats, tau=1..tau_max.

    Equal-width bins per axis over each slice's own range, which makes the
    estimate invariant under affine rescaling of the series.
    """
    x = _scalar_series(series)
    if len(x) < tau_max + 2:
        raise ContractViolation("series too short for the requested lags")
    out = np.empty(tau_max)
    for tau in range(1, tau_max + 1):
        a, b = x[:-tau], x[tau:]
        counts, _, _ = np.histogram2d(a, b, bins=bins)
        p = counts / counts.sum()
        px = p.sum(axis=1, keepdims=True)
        py = p.sum(axis=0, keepdims=True)
        mask = p > 0
        out[tau - 1] = float(np.sum(p[mask] * np.log(p[mask]
                                                     / (px @ py)[mask])))
    return out


def lag_mutual_information(series, tau_max: int = 100, bins: int = 32,
                           flat_floor: float = 0.05) -> int:
    """First local minimum of the lagged mutual information.

    A curve whose bias-corrected maximum stays under flat_floor nats is
    treated as structureless (independent samples): lag 1 is returned with
    a warning.  A curve that never turns upward has no local minimum; the
    argmin is returned with a warning.
    """
    x = _scalar_series(series)
    curve = mutual_information_curve(x, tau_max=tau_max, bins=bins)
    # first-order bias of the histogram estimate, (bins-1)^2 / 2N
    bias = (bins - 1) ** 2 / (2.0 * max(len(x) - 1, 1))
    if float(curve.max()) - bias < flat_floor:
        warnings.warn("mutual information is flat; series looks "
                      "independent, returning lag 1", stacklevel=2)
        return 1
    for j in range(1, tau_max):
        if curve[j] > curve[j - 1]:
            return j
    warnings.warn("no local minimum of mutual information in range; "
                  "returning the argmin", stacklevel=2)
    return int(np.argmin(curve)) + 1


def lag_autocorrelation(series, tau_max: int = 100,
                        criterion: str = "1/e") -> int:
    """Smallest lag where the autocorrelation crosses the criterion.

    criterion "1/e" uses the e-folding threshold, "zero" the first
    nonpositive value.  With no crossing in range the argmin is returned
    with a warning; a constant series has no autocorrelation and is
    rejected.
    """
    x = _scalar_series(series)
    if len(x) < tau_max + 2:
        raise ContractViolation("series too short for the requested lags")
    if criterion not in ("1/e", "zero"):
        raise ContractViolation(f"unknown criterion '{criterion}'")
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom <= 0.0:
        raise ContractViolation("constant series has undefined autocorrelation")
    acf = np.array([float(xc[:-tau] @ xc[tau:]) / denom
                    for tau in range(1, tau_max + 1)])
    threshold = 1.0 / np.e if criterion == "1/e" else 0.0
    below = np.flatnonzero(acf <= threshold)
    if below.size:
        return int(below[0]) + 1
    warnings.warn("autocorrelation never crosses the threshold in range; "
                  "returning the argmin", stacklevel=2)
    return int(np.argmin(acf)) + 1


# ---------------------------------------------------------------------------
# embedding dimension
# ---------------------------------------------------------------------------

def fnn_dimension(series, lag: int, d_max: int = 10, rtol: float = 10.0,
                  atol: float = 2.0, threshold: float = 0.01) -> int:
    """Smallest dimension with a false-nearest-neighbor fraction below
    threshold; both classical criteria (distance blow-up ratio over rtol,
    absolute jump over atol attractor sizes) mark a neighbor false.

    Returns d_max with a warning when the fraction never drops, which is
    the expected signature of noise without a finite-dimensional attractor.
    """
    x = _scalar_series(series)
    if lag < 1:
        raise ContractViolation("lag must be >= 1")
    if d_max < 1:
        raise ContractViolation("d_max must be >= 1")
    if len(x) - d_max * lag < 10:
        raise ContractViolation("series too short for the dimension sweep")
    size = float(x.std())
    if size == 0.0:
        raise ContractViolation("constant series has no geometry")

    for d in range(1, d_max + 1):
        m = len(x) - d * lag          # rows that still have the next lag
        idx = np.arange(m)[:, None] + lag * np.arange(d)[None, :]
        E = x[idx]
        extra = x[d * lag:]
        _, nn = cKDTree(E).query(E, k=2)
        neigh = nn[:, 1]
        rd = np.linalg.norm(E - E[neigh], axis=1)
        jump = np.abs(extra - extra[neigh])
        # the distance ratio is meaningless for coincident pairs (periodic
        # revisits land within roundoff of each other); such pairs are
        # judged by the absolute-jump criterion alone
        apart = rd > 1e-10 * size
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = jump / rd
        false = apart & (ratio > rtol)
        false |= np.sqrt(rd ** 2 + jump ** 2) / size > atol
        if float(np.mean(false)) < threshold:
            return d
    warnings.warn("false-neighbor fraction never dropped below threshold; "
                  "returning d_max", stacklevel=2)
    return d_max


def whitney_dimension(p: int) -> int:
    """Topological sufficient embedding dimension 2p+1 for a p-manifold."""
    if not (isinstance(p, (int, np.integer)) and p >= 1):
        raise ContractViolation(f"manifold dimension must be >= 1, got {p}")
    return 2 * int(p) + 1


# ---------------------------------------------------------------------------
# Hankel construction
# ---------------------------------------------------------------------------

def hankel_embed(series, spec: DelaySpec) -> np.ndarray:
    """Delay-vector rows, newest sample first, channels stacked blockwise.

    Row i holds, per channel, [x_{t}, x_{t-lag}, ..., x_{t-(dim-1)lag}] with
    t = (dim-1)*lag + i, so row count is N - (dim-1)*lag.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ContractViolation("series must be 1-d or (N, channels)")
    n = x.shape[0]
    t0 = (spec.dim - 1) * spec.lag
    m = n - t0
    if m < 1:
        raise ContractViolation(
            f"need at least {t0 + 1} samples for lag {spec.lag}, "
            f"dim {spec.dim}; got {n}")
    idx = t0 + np.arange(m)[:, None] - spec.lag * np.arange(spec.dim)[None, :]
    blocks = [x[idx, c] for c in range(x.shape[1])]
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# delay EDMD
# ---------------------------------------------------------------------------

@dataclass
class EDMDModel:
    """Truncated SVD basis of delay vectors plus a one-step operator."""

    basis: np.ndarray              # (k, P), orthonormal rows
    operator: np.ndarray           # (k, k): v_{t+1} = operator @ v_t
    singular_values: np.ndarray    # (k,)
    spec: DelaySpec
    channels: int
    spectral_radius: float


STABILITY_SLACK = 1e-6


def fit_delay_edmd(series, spec: DelaySpec, svd_rank: int) -> EDMDModel:
    """Least-squares one-step operator in truncated delay-SVD coordinates.

    The basis keeps at most svd_rank directions, fewer (with a warning)
    when the data matrix has lower numerical rank.  A fitted operator
    whose spectral radius exceeds 1 + 1e-6 draws a stability warning: on
    bounded input the least-squares fit should not be expanding.
    """
    if svd_rank < 1:
        raise ContractViolation("svd_rank must be >= 1")
    x = np.asarray(series, dtype=float)
    channels = 1 if x.ndim == 1 else x.shape[1]
    H = hankel_embed(x, spec)
    if H.shape[0] < 2:
        raise ContractViolation("need at least two delay rows to fit")
    _, s, Vt = np.linalg.svd(H, full_matrices=False)
    usable = int(np.sum(s > 1e-10 * max(float(s[0]), 1e-300)))
    usable = max(usable, 1)
    k = min(svd_rank, usable)
    if k < svd_rank:
        warnings.warn(
            f"delay matrix rank {usable} below requested {svd_rank}; "
            f"truncating", stacklevel=2)
    basis = Vt[:k].copy()
    V = H @ basis.T
    K_t, *_ = np.linalg.lstsq(V[:-1], V[1:], rcond=None)
    operator = np.ascontiguousarray(K_t.T)
    radius = float(np.max(np.abs(np.linalg.eigvals(operator))))
    if radius > 1.0 + STABILITY_SLACK:
        warnings.warn(f"fitted operator is expanding (spectral radius "
                      f"{radius:.6f})", stacklevel=2)
    return EDMDModel(basis=basis, operator=operator,
                     singular_values=s[:k].copy(), spec=spec,
                     channels=channels, spectral_radius=radius)


def edmd_forecast(model: EDMDModel, history, horizon: int) -> np.ndarray:
    """Iterate the reduced operator from the newest delay vector of history.

    Returns (horizon, channels): each step lifts the reduced state back to
    a delay vector and reads the newest sample of every channel block.
    """
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    x = np.asarray(history, dtype=float)
    if (x.ndim == 2 and x.shape[1] != model.channels) \
            or (x.ndim == 1 and model.channels != 1):
        raise ContractViolation("history channel count does not match model")
    h = hankel_embed(x, model.spec)[-1]
    v = model.basis @ h
    dim = model.spec.dim
    out = np.empty((horizon, model.channels))
    for step in range(horizon):
        v = model.operator @ v
        lifted = model.basis.T @ v
        out[step] = lifted[::dim][:model.channels] if dim > 0 else lifted
    return out


def save_edmd(path, model: EDMDModel) -> None:
    """Flat float64 dump (basis, operator, singular values) after a text
    header carrying the shapes, the delay spec, and the spectral radius."""
    k, p = model.basis.shape
    header = (f"edmd {k} {p} {model.spec.lag} {model.spec.dim} "
              f"{model.channels} {model.spectral_radius!r}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for arr in (model.basis, model.operator, model.singular_values):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_edmd(path) -> EDMDModel:
    with open(path, "rb") as fh:
        parts = fh.readline().decode("ascii").split()
        if len(parts) != 7 or parts[0] != "edmd":
            raise ContractViolation("not a delay-EDMD model file")
        k, p, lag, dim, channels = (int(v) for v in parts[1:6])
        radius = float(parts[6])
        data = np.frombuffer(fh.read(), dtype="<f8")
    expect = k * p + k * k + k
    if data.size != expect:
        raise ContractViolation("model file payload has the wrong size")
    basis = data[:k * p].reshape(k, p).copy()
    operator = data[k * p:k * p + k * k].reshape(k, k).copy()
    sing = data[k * p + k * k:].copy()
    return EDMDModel(basis=basis, operator=operator, singular_values=sing,
                     spec=DelaySpec(lag=lag, dim=dim), channels=channels,
                     spectral_radius=radius)
