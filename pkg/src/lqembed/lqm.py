"""Linear-quadratic ODE models with boundedness diagnostics.

The model class is

    du/dt = c + L u + [u^T Q^(1) u, ..., u^T Q^(d) u]^T

with each Q^(i) symmetric.  Quadratic coefficients are stored as packed
upper triangles (dense storage) or as one circular stencil shared across
components (convolutional storage), so symmetry holds by construction.

Boundedness analysis shifts the state by a point m: with

    d = f(m),    A = jacobian of f at m,    A_s = (A + A^T) / 2,

the fluctuation energy K = ||u - m||^2 / 2 satisfies
dK/dt = ubar^T A_s ubar + d . ubar whenever the quadratic term is
energy preserving.  If the largest eigenvalue of A_s is negative, every
trajectory is eventually trapped in the ball of radius ||d|| / |alpha_max|
around m.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, NumericalError

__all__ = [
    "DenseQuad",
    "ConvQuad",
    "LQModel",
    "ShiftedSystem",
    "eval_field",
    "field_jacobian",
    "energy_residual",
    "energy_residual_grad",
    "build_shifted",
    "eval_shifted_field",
    "eig_penalty",
    "eig_penalty_slope",
    "fluctuation_energy_rate",
    "trapping_ball_radius",
    "symmetric_eigh",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]


# ---------------------------------------------------------------------------
# packed symmetric storage helpers
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _triu_indices(d: int):
    rows, cols = np.triu_indices(d)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def packed_length(d: int) -> int:
    return d * (d + 1) // 2


class DenseQuad:
    """Per-component symmetric quadratic forms, packed upper triangles.

    ``params[i]`` holds the upper triangle of Q^(i) in row-major (j <= k)
    order.  The dense (d, d, d) view is cached and rebuilt whenever the
    parameters change through :meth:`set_flat`.
    """

    kind = "dense"

    def __init__(self, dim: int, params: np.ndarray | None = None):
        if dim < 1:
            raise ContractViolation(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.n_pack = packed_length(dim)
        if params is None:
            params = np.zeros((dim, self.n_pack))
        params = np.asarray(params, dtype=float)
        if params.shape != (dim, self.n_pack):
            raise ContractViolation(
                f"dense quad params must have shape {(dim, self.n_pack)}, "
                f"got {params.shape}")
        self.params = params.copy()
        rows, cols = _triu_indices(dim)
        self._rows, self._cols = rows, cols
        # feature weight 2 - delta_jk: u^T Q u = sum_{j<=k} w_jk q_jk u_j u_k
        self._pack_weight = np.where(rows == cols, 1.0, 2.0)
        self._dense = None

    # -- parameter access ---------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.dim * self.n_pack

    def get_flat(self) -> np.ndarray:
        return self.params.reshape(-1).copy()

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ContractViolation("parameter vector has wrong length")
        self.params = vec.reshape(self.dim, self.n_pack).copy()
        self._dense = None

    def dense(self) -> np.ndarray:
        if self._dense is None:
            d = self.dim
            Q = np.zeros((d, d, d))
            Q[:, self._rows, self._cols] = self.params
            Q[:, self._cols, self._rows] = self.params
            self._dense = Q
        return self._dense

    # -- evaluation ---------------------------------------------------------

    def eval(self, U: np.ndarray) -> np.ndarray:
        """Quadratic term, batched over leading axes of U (..., d)."""
        z = U[..., self._rows] * U[..., self._cols] * self._pack_weight
        return z @ self.params.T

    def vjp_state(self, U: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Gradient wrt u of sum_i W_i * (u^T Q^(i) u), batched.

        Equals 2 * sum_i W_i Q^(i) u.
        """
        Q = self.dense()
        d = self.dim
        M = (W @ Q.reshape(d, d * d)).reshape(*W.shape[:-1], d, d)
        return 2.0 * np.einsum("...jk,...k->...j", M, U)

    def grad_params(self, U: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Flat parameter gradient of sum_batch W . quad(U)."""
        z = U[..., self._rows] * U[..., self._cols] * self._pack_weight
        zf = z.reshape(-1, self.n_pack)
        wf = W.reshape(-1, self.dim)
        return (wf.T @ zf).reshape(-1)

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        """Rows 2 u^T Q^(i) of the quadratic term's Jacobian at u."""
        return 2.0 * np.einsum("ijk,k->ij", self.dense(), u)

    def accumulate_dense_grad(self, G: np.ndarray) -> np.ndarray:
        """Map a gradient wrt the dense (d,d,d) view onto packed params.

        Each packed off-diagonal parameter defines both (j,k) and (k,j)
        dense entries, so their dense gradients add.
        """
        g = G[:, self._rows, self._cols].copy()
        off = self._rows != self._cols
        g[:, off] += G[:, self._cols[off], self._rows[off]]
        return g.reshape(-1)

    def structure_dict(self) -> dict:
        return {"kind": "dense"}


class ConvQuad:
    """One circular symmetric stencil shared across all components.

    The dense view is q_{i,j,k} = S[a, b] whenever j = i + a and
    k = i + b modulo dim for window offsets a, b in [-reach, reach].
    The stencil S is symmetric and stored packed over offset pairs.
    Mirrors cyclic nearest-neighbour couplings (Lorenz-96 style) with
    far fewer parameters than per-component storage.
    """

    kind = "convolutional"

    def __init__(self, dim: int, reach: int, params: np.ndarray | None = None):
        if reach < 0 or 2 * reach + 1 > dim:
            raise ContractViolation(
                f"stencil window 2*{reach}+1 must fit inside dim {dim}")
        self.dim = dim
        self.reach = reach
        self.offsets = np.arange(-reach, reach + 1)
        n_off = len(self.offsets)
        ia, ib = np.triu_indices(n_off)
        self._ia, self._ib = ia, ib           # indices into self.offsets
        self.n_pack = len(ia)
        self._pack_weight = np.where(ia == ib, 1.0, 2.0)
        if params is None:
            params = np.zeros(self.n_pack)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_pack,):
            raise ContractViolation(
                f"stencil params must have shape {(self.n_pack,)}, "
                f"got {params.shape}")
        self.params = params.copy()
        self._dense = None

    @property
    def n_params(self) -> int:
        return self.n_pack

    def get_flat(self) -> np.ndarray:
        return self.params.copy()

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_pack:
            raise ContractViolation("stencil vector has wrong length")
        self.params = vec.reshape(-1).copy()
        self._dense = None

    def _rolled(self, U: np.ndarray) -> dict[int, np.ndarray]:
        return {int(o): np.roll(U, -int(o), axis=-1) for o in self.offsets}

    def eval(self, U: np.ndarray) -> np.ndarray:
        rolled = self._rolled(U)
        out = np.zeros_like(U)
        for p in range(self.n_pack):
            a = int(self.offsets[self._ia[p]])
            b = int(self.offsets[self._ib[p]])
            out += (self.params[p] * self._pack_weight[p]) \
                * rolled[a] * rolled[b]
        return out

    def vjp_state(self, U: np.ndarray, W: np.ndarray) -> np.ndarray:
        out = np.zeros_like(U)
        for p in range(self.n_pack):
            a = int(self.offsets[self._ia[p]])
            b = int(self.offsets[self._ib[p]])
            s = self.params[p]
            # d/du_r of sum_i w_i q_i(u), ordered pair (a, b)
            out += 2.0 * s * np.roll(W, a, axis=-1) * np.roll(U, a - b, axis=-1)
            if a != b:
                out += 2.0 * s * np.roll(W, b, axis=-1) * np.roll(U, b - a, axis=-1)
        return out

    def grad_params(self, U: np.ndarray, W: np.ndarray) -> np.ndarray:
        rolled = self._rolled(U)
        grad = np.zeros(self.n_pack)
        for p in range(self.n_pack):
            a = int(self.offsets[self._ia[p]])
            b = int(self.offsets[self._ib[p]])
            grad[p] = self._pack_weight[p] * np.sum(W * rolled[a] * rolled[b])
        return grad

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        d = self.dim
        J = np.zeros((d, d))
        i = np.arange(d)
        S = self._full_stencil()
        for ja, a in enumerate(self.offsets):
            col = (i + int(a)) % d
            acc = np.zeros(d)
            for jb, b in enumerate(self.offsets):
                acc += S[ja, jb] * u[(i + int(b)) % d]
            J[i, col] += 2.0 * acc
        return J

    def _full_stencil(self) -> np.ndarray:
        n_off = len(self.offsets)
        S = np.zeros((n_off, n_off))
        S[self._ia, self._ib] = self.params
        S[self._ib, self._ia] = self.params
        return S

    def dense(self) -> np.ndarray:
        if self._dense is None:
            d = self.dim
            Q = np.zeros((d, d, d))
            i = np.arange(d)
            S = self._full_stencil()
            for ja, a in enumerate(self.offsets):
                for jb, b in enumerate(self.offsets):
                    Q[i, (i + int(a)) % d, (i + int(b)) % d] = S[ja, jb]
            self._dense = Q
        return self._dense

    def accumulate_dense_grad(self, G: np.ndarray) -> np.ndarray:
        d = self.dim
        i = np.arange(d)
        grad = np.zeros(self.n_pack)
        for p in range(self.n_pack):
            a = int(self.offsets[self._ia[p]])
            b = int(self.offsets[self._ib[p]])
            grad[p] = np.sum(G[i, (i + a) % d, (i + b) % d])
            if a != b:
                grad[p] += np.sum(G[i, (i + b) % d, (i + a) % d])
        return grad

    def structure_dict(self) -> dict:
        return {"kind": "convolutional", "reach": self.reach}


def make_quad(dim: int, structure: dict, params: np.ndarray | None = None):
    kind = structure.get("kind")
    if kind == "dense":
        return DenseQuad(dim, params)
    if kind == "convolutional":
        return ConvQuad(dim, int(structure["reach"]), params)
    raise ContractViolation(f"unknown quad structure {structure!r}")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class LQModel:
    """Linear-quadratic vector field plus a trapping shift point m.

    m does not enter the dynamics; it is the candidate center of the
    trapping ball used by the boundedness analysis and, in constrained
    training, the offset added before reading out observations.
    """

    dim: int
    c: np.ndarray
    L: np.ndarray
    quad: DenseQuad | ConvQuad
    m: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.L = np.asarray(self.L, dtype=float)
        self.m = np.asarray(self.m, dtype=float).reshape(-1)
        d = self.dim
        if self.c.shape != (d,) or self.L.shape != (d, d) or self.m.shape != (d,):
            raise ContractViolation(
                f"inconsistent shapes for dim {d}: c {self.c.shape}, "
                f"L {self.L.shape}, m {self.m.shape}")
        if self.quad.dim != d:
            raise ContractViolation("quad storage dim mismatch")

    @classmethod
    def zeros(cls, dim: int, structure: dict | None = None) -> "LQModel":
        structure = structure or {"kind": "dense"}
        return cls(dim, np.zeros(dim), np.zeros((dim, dim)),
                   make_quad(dim, structure), np.zeros(dim))

    def copy(self) -> "LQModel":
        quad = make_quad(self.dim, self.quad.structure_dict())
        quad.set_flat(self.quad.get_flat())
        return LQModel(self.dim, self.c.copy(), self.L.copy(), quad,
                       self.m.copy())


def eval_field(model: LQModel, U: np.ndarray) -> np.ndarray:
    """du/dt = c + L u + quad(u), batched over leading axes of U."""
    U = np.asarray(U, dtype=float)
    if U.shape[-1] != model.dim:
        raise ContractViolation(
            f"state has dim {U.shape[-1]}, model has dim {model.dim}")
    return model.c + U @ model.L.T + model.quad.eval(U)


def field_jacobian(model: LQModel, u: np.ndarray) -> np.ndarray:
    """Jacobian L + [2 u^T Q^(i)]_i of the field at a single state u."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != (model.dim,):
        raise ContractViolation("field_jacobian expects a single state vector")
    return model.L + model.quad.jacobian(u)


# ---------------------------------------------------------------------------
# energy-preserving residual (constraint C1)
# ---------------------------------------------------------------------------

def _perm_sum(Q: np.ndarray) -> np.ndarray:
    # E_ijk = q_ijk + q_jik + q_kij; fully symmetric when each Q^(i) is.
    return Q + np.einsum("jik->ijk", Q) + np.einsum("kij->ijk", Q)


def energy_residual(model_or_quad) -> float:
    """Sum over ordered triples of (q_ijk + q_jik + q_kij)^2.

    Zero exactly when the quadratic term preserves energy
    (u . quad(u) = 0 for all u).  Equals the multiplicity-weighted sum
    over unordered triples i <= j <= k.
    """
    quad = model_or_quad.quad if isinstance(model_or_quad, LQModel) else model_or_quad
    E = _perm_sum(quad.dense())
    return float(np.sum(E * E))


def energy_residual_grad(model_or_quad) -> tuple[float, np.ndarray]:
    """Residual value and its gradient wrt the quad's packed parameters."""
    quad = model_or_quad.quad if isinstance(model_or_quad, LQModel) else model_or_quad
    E = _perm_sum(quad.dense())
    value = float(np.sum(E * E))
    # dC1/dQ_dense = 6 E because E is invariant under all index permutations
    return value, quad.accumulate_dense_grad(6.0 * E)


# ---------------------------------------------------------------------------
# symmetric eigensolver (cyclic Jacobi, parallel ordering)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple:
    """Round-robin pairings covering all index pairs in disjoint rounds."""
    m = n if n % 2 == 0 else n + 1
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                pairs.append((min(a, b), max(a, b)))
        rounds.append(tuple(pairs))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(rounds)


def symmetric_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100,
                   warm_start: np.ndarray | None = None):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate pairs in a round-robin schedule (disjoint pairs per
    round, so each round's pivots are zeroed exactly).  Converged when the
    off-diagonal Frobenius norm drops below ``tol`` relative to the matrix
    scale.  Returns eigenvalues ascending and the matching orthonormal
    eigenvector columns.

    A warm-start basis (e.g. last epoch's eigenvectors) rotates the matrix
    near diagonal first, which usually cuts the sweep count to one or two.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ContractViolation("symmetric_eigh expects a square matrix")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, float(np.abs(A).max(initial=0.0)))):
        raise ContractViolation("matrix is not symmetric")
    B = 0.5 * (A + A.T)
    scale = float(np.linalg.norm(B))
    # absolute tol is unreachable in float64 once ||A|| >> 1, so scale it
    tol_eff = tol * max(1.0, scale)
    if warm_start is not None:
        V = np.asarray(warm_start, dtype=float).copy()
        B = V.T @ B @ V
        B = 0.5 * (B + B.T)
    else:
        V = np.eye(n)
    if n == 1:
        return B.reshape(1).copy(), V

    off_hist = []
    for sweep in range(max_sweeps):
        # measure off-diagonal mass directly; the ||B||^2 - ||diag||^2 form
        # cancels catastrophically and reads 0 while entries are still ~1e-8
        od = B.copy()
        np.fill_diagonal(od, 0.0)
        off = float(np.linalg.norm(od))
        off_hist.append(off)
        if off < tol_eff:
            order = np.argsort(np.diag(B), kind="stable")
            return np.diag(B)[order].copy(), V[:, order].copy()
        for pairs in _round_robin(n):
            p = np.fromiter((pq[0] for pq in pairs), dtype=int)
            q = np.fromiter((pq[1] for pq in pairs), dtype=int)
            apq = B[p, q]
            live = np.abs(apq) > 1e-300
            if not np.any(live):
                continue
            p, q, apq = p[live], q[live], apq[live]
            app, aqq = B[p, p], B[q, q]
            tau = (aqq - app) / (2.0 * apq)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(tau == 0.0, 1.0, t)
            cos = 1.0 / np.sqrt(1.0 + t * t)
            sin = t * cos
            # rows, then columns, then eigenvector columns
            Bp = B[p, :]
            Bq = B[q, :]
            B[p, :] = cos[:, None] * Bp - sin[:, None] * Bq
            B[q, :] = sin[:, None] * Bp + cos[:, None] * Bq
            Bp = B[:, p]
            Bq = B[:, q]
            B[:, p] = cos[None, :] * Bp - sin[None, :] * Bq
            B[:, q] = sin[None, :] * Bp + cos[None, :] * Bq
            B[p, q] = 0.0
            B[q, p] = 0.0
            Vp = V[:, p]
            Vq = V[:, q]
            V[:, p] = cos[None, :] * Vp - sin[None, :] * Vq
            V[:, q] = sin[None, :] * Vp + cos[None, :] * Vq
    raise NumericalError(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps",
        sweeps=max_sweeps, off_diagonal=off_hist[-5:], tol=tol_eff, dim=n)


# ---------------------------------------------------------------------------
# shifted system and trapping diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ShiftedSystem:
    """Constant term, Jacobian, and spectrum of the field shifted to m."""

    d: np.ndarray              # f(m)
    A: np.ndarray              # jacobian of f at m
    A_sym: np.ndarray          # (A + A^T) / 2
    eigenvalues: np.ndarray    # of A_sym, ascending
    eigenvectors: np.ndarray   # matching orthonormal columns


def build_shifted(model: LQModel, warm_start: np.ndarray | None = None) -> ShiftedSystem:
    d_vec = eval_field(model, model.m)
    A = field_jacobian(model, model.m)
    A_sym = 0.5 * (A + A.T)
    w, V = symmetric_eigh(A_sym, warm_start=warm_start)
    return ShiftedSystem(d=d_vec, A=A, A_sym=A_sym, eigenvalues=w, eigenvectors=V)


def eval_shifted_field(sys: ShiftedSystem, quad, ubar: np.ndarray) -> np.ndarray:
    """Field of the fluctuation ubar = u - m: d + A ubar + quad(ubar).

    Exact because the field is polynomial of degree two; equals
    eval_field(model, ubar + m) for the originating model.
    """
    ubar = np.asarray(ubar, dtype=float)
    return sys.d + ubar @ sys.A.T + quad.eval(ubar)


def eig_penalty(eigenvalues: np.ndarray) -> float:
    """Sum over eigenvalues of 0 if a <= 0 else a / (a + 1).

    Each term lies in [0, 1), so the penalty is bounded by the dimension.
    The a <= 0 branch also covers a <= -1, where the ratio form would be
    undefined.
    """
    a = np.asarray(eigenvalues, dtype=float)
    pos = a > 0.0
    return float(np.sum(a[pos] / (a[pos] + 1.0)))


def eig_penalty_slope(eigenvalues: np.ndarray) -> np.ndarray:
    """Per-eigenvalue derivative of eig_penalty: 0 or 1/(a+1)^2."""
    a = np.asarray(eigenvalues, dtype=float)
    out = np.zeros_like(a)
    pos = a > 0.0
    out[pos] = 1.0 / (a[pos] + 1.0) ** 2
    return out


def fluctuation_energy_rate(sys: ShiftedSystem, ubar: np.ndarray) -> np.ndarray | float:
    """dK/dt = ubar^T A_s ubar + d . ubar, batched over leading axes."""
    ubar = np.asarray(ubar, dtype=float)
    quad_part = np.einsum("...j,jk,...k->...", ubar, sys.A_sym, ubar)
    lin_part = ubar @ sys.d
    out = quad_part + lin_part
    return float(out) if out.ndim == 0 else out


def trapping_ball_radius(sys: ShiftedSystem) -> float:
    """||d|| / |alpha_max| when alpha_max < 0, else inf (no finite ball)."""
    alpha_max = float(sys.eigenvalues[-1])
    if alpha_max >= 0.0:
        return float("inf")
    return float(np.linalg.norm(sys.d) / (-alpha_max))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(model: LQModel) -> dict:
    quad = model.quad
    out = {
        "dim": model.dim,
        "c": model.c.tolist(),
        "L": model.L.reshape(-1).tolist(),          # row-major
        "Q": _packed_view(quad).tolist(),
        "m": model.m.tolist(),
        "quad_structure": quad.structure_dict(),
    }
    if quad.kind == "convolutional":
        out["quad_structure"]["stencil"] = quad.params.tolist()
        out["quad_structure"]["offsets"] = quad.offsets.tolist()
    return out


def _packed_view(quad) -> np.ndarray:
    """Dense-view packed upper triangles, one row per component."""
    d = quad.dim
    rows, cols = _triu_indices(d)
    return quad.dense()[:, rows, cols]


def model_from_dict(data: dict) -> LQModel:
    dim = int(data["dim"])
    structure = dict(data["quad_structure"])
    kind = structure.get("kind")
    if kind == "convolutional":
        quad = ConvQuad(dim, int(structure["reach"]),
                        np.asarray(structure["stencil"], dtype=float))
        # dense-view packed triangles in "Q" are redundant; check consistency
        stored = np.asarray(data["Q"], dtype=float)
        if stored.shape == _packed_view(quad).shape and not np.array_equal(
                stored, _packed_view(quad)):
            raise ContractViolation("stencil and packed Q views disagree")
    elif kind == "dense":
        quad = DenseQuad(dim, np.asarray(data["Q"], dtype=float))
    else:
        raise ContractViolation(f"unknown quad structure {structure!r}")
    return LQModel(
        dim=dim,
        c=np.asarray(data["c"], dtype=float),
        L=np.asarray(data["L"], dtype=float).reshape(dim, dim),
        quad=quad,
        m=np.asarray(data["m"], dtype=float),
    )


def save_model(model: LQModel, path) -> None:
    """Write the model as JSON; floats round-trip bit-exactly."""
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> LQModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
