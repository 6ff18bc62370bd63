"""Tests for the ground-truth generators: chaotic ODEs, the staggered-grid
shallow-water solver, patch EOF projection, and series serialization."""

import json

import numpy as np
import pytest

from lqembed.errors import BlowupError, ContractViolation
from lqembed.lqm import energy_residual, eval_field, field_jacobian
from lqembed.ode import FlowConfig, rollout
from lqembed.systems import (
    EOFBasis,
    ObservationSeries,
    SWEConfig,
    extract_patch_and_eof,
    generate,
    lorenz63_field,
    lorenz63_true_model,
    lorenz96_field,
    lorenz96_true_model,
    read_series,
    read_snapshots,
    swe_initial_state,
    swe_run,
    swe_step,
    write_series,
    write_snapshots,
)

from util import fd_jacobian, rel_err


# --- oracles -----------------------------------------------------------

def lorenz96_oracle(z, F):
    """Brute-force cyclic evaluation, one index at a time."""
    s = len(z)
    out = np.zeros(s)
    for i in range(s):
        out[i] = (z[(i + 1) % s] - z[(i - 2) % s]) * z[(i - 1) % s] - z[i] + F
    return out


def radial_front_radius(eta, skip=3):
    """Radius (cells) of the expanding ring: argmax of the radially binned
    mean, refined by a parabolic fit around the peak."""
    ny, nx = eta.shape
    cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
    yy, xx = np.mgrid[0:ny, 0:nx]
    rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    bins = np.rint(rr).astype(int)
    nbin = min(bins.max() + 1, nx // 2)
    prof = np.array([eta[bins == b].mean() if np.any(bins == b) else -np.inf
                     for b in range(nbin)])
    b = skip + int(np.argmax(prof[skip:]))
    if 0 < b < nbin - 1:
        denom = prof[b - 1] - 2 * prof[b] + prof[b + 1]
        if denom < 0:
            return b + 0.5 * (prof[b - 1] - prof[b + 1]) / denom
    return float(b)


# --- Lorenz-63 ---------------------------------------------------------

class TestLorenz63:
    def test_origin_fixed_point(self):
        assert np.array_equal(lorenz63_field(np.zeros(3)), np.zeros(3))

    def test_unit_point(self):
        out = lorenz63_field(np.array([1.0, 1.0, 1.0]))
        assert np.allclose(out, [0.0, 26.0, -5.0 / 3.0], atol=1e-14)

    def test_equilibrium(self):
        rho, beta = 28.0, 8.0 / 3.0
        w = np.sqrt(beta * (rho - 1.0))
        out = lorenz63_field(np.array([w, w, rho - 1.0]))
        assert np.max(np.abs(out)) < 1e-12

    def test_batched(self):
        rng = np.random.default_rng(0)
        Z = rng.standard_normal((5, 3))
        batched = lorenz63_field(Z)
        for i in range(5):
            assert np.array_equal(batched[i], lorenz63_field(Z[i]))

    def test_true_model_matches_field(self):
        model = lorenz63_true_model()
        rng = np.random.default_rng(1)
        for _ in range(10):
            z = 10.0 * rng.standard_normal(3)
            assert rel_err(eval_field(model, z), lorenz63_field(z)) < 1e-13

    def test_true_model_jacobian(self):
        model = lorenz63_true_model()
        z = np.array([2.0, -1.0, 15.0])
        J = field_jacobian(model, z)
        J_fd = fd_jacobian(lambda u: lorenz63_field(u), z)
        assert rel_err(J, J_fd) < 1e-7


# --- Lorenz-96 ---------------------------------------------------------

class TestLorenz96:
    def test_uniform_fixed_point(self):
        z = np.full(40, 8.0)
        assert np.max(np.abs(lorenz96_field(z, F=8.0))) < 1e-14

    def test_hand_example_s4(self):
        out = lorenz96_field(np.array([1.0, 2.0, 3.0, 4.0]), F=0.0)
        # first component: (z2 - z3)*z4 - z1 = (2-3)*4 - 1 = -5
        assert out[0] == pytest.approx(-5.0)
        assert np.allclose(out, lorenz96_oracle([1.0, 2.0, 3.0, 4.0], 0.0))

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(2)
        for s in (4, 7, 40):
            z = rng.standard_normal(s) * 3.0
            assert rel_err(lorenz96_field(z, F=8.0),
                           lorenz96_oracle(z, 8.0)) < 1e-13

    def test_cyclic_shift_equivariance(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal(12)
        shifted = lorenz96_field(np.roll(z, 4), F=8.0)
        assert np.array_equal(shifted, np.roll(lorenz96_field(z, F=8.0), 4))

    @pytest.mark.parametrize("s", [12, 40])
    def test_true_model_matches_field(self, s):
        model = lorenz96_true_model(s=s)
        rng = np.random.default_rng(4)
        for _ in range(5):
            z = 3.0 * rng.standard_normal(s)
            # elementwise relative error needs headroom near zero crossings
            assert rel_err(eval_field(model, z),
                           lorenz96_field(z, F=8.0)) < 1e-12

    def test_true_model_energy_preserving(self):
        # the advection term is energy neutral, so the residual is exactly 0
        model = lorenz96_true_model(s=12)
        assert energy_residual(model) == 0.0

    def test_true_model_is_convolutional(self):
        model = lorenz96_true_model(s=12)
        assert model.quad.structure_dict() == {"kind": "convolutional",
                                               "reach": 2}


# --- generate ----------------------------------------------------------

class TestGenerate:
    def test_single_step(self):
        series = generate("lorenz63", n_steps=1, dt=0.01, transient=5, seed=0)
        assert series.values.shape == (1, 1)
        assert np.all(np.isfinite(series.values))

    def test_lorenz63_shape_and_split(self):
        series = generate("lorenz63", n_steps=200, dt=0.01, transient=20,
                          seed=1)
        assert series.values.shape == (200, 1)
        assert series.meta["split_index"] == 160
        assert series.meta["generator"] == "lorenz63"
        assert series.dt == pytest.approx(0.01)

    def test_lorenz96_width(self):
        series = generate("lorenz96", n_steps=50, dt=0.01, transient=10,
                          seed=2)
        assert series.values.shape == (50, 20)

    def test_deterministic(self):
        a = generate("lorenz63", n_steps=30, dt=0.01, transient=5, seed=7)
        b = generate("lorenz63", n_steps=30, dt=0.01, transient=5, seed=7)
        assert np.array_equal(a.values, b.values)

    def test_full_state_observation(self):
        series = generate("lorenz63", n_steps=20, dt=0.01, transient=5,
                          seed=3, observe="full")
        assert series.values.shape == (20, 3)

    def test_unknown_system_rejected(self):
        with pytest.raises(ContractViolation):
            generate("lorenz12", n_steps=5, dt=0.01, transient=0, seed=0)

    def test_rk4_agreement_short_horizon(self):
        # fixed-step RK4 tracks the adaptive reference before chaotic
        # amplification dominates; the gap scales as dt^4 (measured
        # 1.6e-5 at dt=0.01, 2.5e-8 at dt=0.002 over the same horizon)
        series = generate("lorenz63", n_steps=11, dt=0.01, transient=50,
                          seed=4, observe="full")
        traj = rollout(lorenz63_true_model(), series.values[0], 10,
                       FlowConfig(dt=0.01))
        assert np.max(np.abs(traj.states - series.values[:11])) < 5e-5

    def test_rk4_agreement_fine_step(self):
        # at dt=0.002 the same 0.1 time-unit horizon is inside 1e-6
        series = generate("lorenz63", n_steps=51, dt=0.002, transient=250,
                          seed=4, observe="full")
        traj = rollout(lorenz63_true_model(), series.values[0], 50,
                       FlowConfig(dt=0.002))
        assert np.max(np.abs(traj.states - series.values[:51])) < 1e-6


# --- shallow water -----------------------------------------------------

def desk_cfg(**kw):
    return SWEConfig(**kw)


class TestSWE:
    def test_cfl_derived_dt(self):
        cfg = desk_cfg()
        dx = cfg.length / cfg.nx
        assert cfg.dt == pytest.approx(cfg.safety * dx / np.sqrt(
            cfg.gravity * cfg.depth))

    def test_cfl_violation_rejected(self):
        dx = 1.0e6 / 40
        bound = dx / np.sqrt(9.81 * 100.0)
        with pytest.raises(ContractViolation):
            desk_cfg(dt=2.0 * bound)

    def test_patch_inside_domain(self):
        with pytest.raises(ContractViolation):
            desk_cfg(patch_center=(0.95e6, 0.5e6), patch_side=0.25e6)

    def test_rest_state_fixed(self):
        cfg = desk_cfg()
        state = {"eta": np.zeros((cfg.ny, cfg.nx)),
                 "vx": np.zeros((cfg.ny, cfg.nx)),
                 "vy": np.zeros((cfg.ny, cfg.nx))}
        out = swe_step(state, cfg)
        assert np.array_equal(out["eta"], state["eta"])
        assert np.array_equal(out["vx"], state["vx"])
        assert np.array_equal(out["vy"], state["vy"])

    def test_volume_conservation(self):
        cfg = desk_cfg()
        state = swe_initial_state(cfg, seed=11)
        vol0 = float(np.sum(state["eta"] + cfg.depth))
        for _ in range(1000):
            state = swe_step(state, cfg)
        vol1 = float(np.sum(state["eta"] + cfg.depth))
        # flux form on a periodic grid telescopes, so drift is pure roundoff
        assert abs(vol1 - vol0) / vol0 < 1e-12

    def test_gravity_wave_speed(self):
        # f=0 Gaussian bump: ring radius grows at sqrt(g*depth) +- 10%
        cfg = desk_cfg(f0=0.0, beta=0.0)
        dx = cfg.length / cfg.nx
        yy, xx = np.mgrid[0:cfg.ny, 0:cfg.nx].astype(float)
        cy, cx = (cfg.ny - 1) / 2.0, (cfg.nx - 1) / 2.0
        eta = 0.1 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 2.0 ** 2))
        state = {"eta": eta, "vx": np.zeros_like(eta),
                 "vy": np.zeros_like(eta)}
        checkpoints = np.arange(30, 81, 10)
        radii = []
        step = 0
        for target in checkpoints:
            while step < target:
                state = swe_step(state, cfg)
                step += 1
            radii.append(radial_front_radius(state["eta"]))
        slope = np.polyfit(checkpoints * cfg.dt, np.array(radii) * dx, 1)[0]
        want = np.sqrt(cfg.gravity * cfg.depth)
        assert abs(slope - want) / want < 0.10

    def test_run_records_and_guards(self):
        cfg = desk_cfg(n_steps=40, transient=10)
        snaps, times = swe_run(cfg, seed=5, record_every=2)
        assert snaps.shape == (16, cfg.ny, cfg.nx)
        assert np.all(np.isfinite(snaps))
        assert times[1] - times[0] == pytest.approx(2 * cfg.dt)

    def test_run_deterministic(self):
        cfg = desk_cfg(n_steps=20, transient=0)
        a, _ = swe_run(cfg, seed=9)
        b, _ = swe_run(cfg, seed=9)
        assert np.array_equal(a, b)

    def test_blowup_guard(self):
        cfg = desk_cfg()
        state = swe_initial_state(cfg, seed=0)
        state["eta"][0, 0] = np.nan
        with pytest.raises(BlowupError):
            swe_step(state, cfg)


# --- EOF extraction ----------------------------------------------------

class TestEOF:
    def make_snapshots(self, n, cfg, seed=0):
        rng = np.random.default_rng(seed)
        yy, xx = np.mgrid[0:cfg.ny, 0:cfg.nx].astype(float)
        snaps = np.empty((n, cfg.ny, cfg.nx))
        for t in range(n):
            snaps[t] = (np.sin(2 * np.pi * (xx / cfg.nx + 0.1 * t))
                        + 0.5 * np.cos(2 * np.pi * (yy / cfg.ny - 0.07 * t))
                        + 0.05 * rng.standard_normal((cfg.ny, cfg.nx)))
        return snaps

    def test_rank_one_single_mode(self):
        cfg = desk_cfg(eof_modes=3)
        base = np.outer(np.arange(cfg.ny), np.ones(cfg.nx))
        snaps = np.array([(1.0 + 0.5 * t) * base for t in range(6)])
        with pytest.warns(UserWarning):
            basis, series = extract_patch_and_eof(snaps, cfg)
        assert basis.modes.shape[0] == 1
        assert basis.variance_fraction == pytest.approx(1.0)
        assert series.values.shape == (6, 1)

    def test_orthonormal_modes(self):
        cfg = desk_cfg(eof_modes=4)
        snaps = self.make_snapshots(30, cfg)
        basis, series = extract_patch_and_eof(snaps, cfg)
        G = basis.modes @ basis.modes.T
        assert np.max(np.abs(G - np.eye(4))) < 1e-10

    def test_reconstruction_error_identity(self):
        cfg = desk_cfg(eof_modes=4)
        snaps = self.make_snapshots(25, cfg)
        basis, series = extract_patch_and_eof(snaps, cfg)
        X = basis.crop(snaps)
        Xc = X - basis.mean
        recon = series.values @ basis.modes
        err = float(np.sum((Xc - recon) ** 2))
        total = float(np.sum(Xc ** 2))
        # aggregate residual equals the discarded tail variance
        assert err == pytest.approx((1.0 - basis.variance_fraction) * total,
                                    rel=1e-10)

    def test_projection_round_trip(self):
        cfg = desk_cfg(eof_modes=5)
        snaps = self.make_snapshots(20, cfg)
        basis, series = extract_patch_and_eof(snaps, cfg)
        coeffs = basis.project(basis.crop(snaps))
        assert rel_err(coeffs, series.values) < 1e-10
        patch_rows = basis.reconstruct(coeffs)
        assert patch_rows.shape == (20, basis.mean.size)

    def test_fit_count_restricts_basis(self):
        cfg = desk_cfg(eof_modes=3)
        snaps = self.make_snapshots(30, cfg)
        basis_all, _ = extract_patch_and_eof(snaps, cfg)
        basis_fit, series = extract_patch_and_eof(snaps, cfg, fit_count=20)
        fit_X = basis_fit.crop(snaps[:20])
        assert np.allclose(basis_fit.mean, fit_X.mean(axis=0))
        assert series.values.shape == (30, 3)
        assert not np.allclose(basis_all.mean, basis_fit.mean)


# --- series I/O --------------------------------------------------------

class TestSeriesIO:
    def test_round_trip_with_sidecar(self, tmp_path):
        values = np.random.default_rng(0).standard_normal((12, 3))
        series = ObservationSeries(dt=0.02, values=values,
                                   meta={"generator": "lorenz63", "seed": 5,
                                         "split_index": 9})
        path = tmp_path / "series.csv"
        write_series(series, path)
        back = read_series(path)
        assert np.array_equal(back.values, series.values)
        assert back.dt == pytest.approx(series.dt)
        assert back.meta["generator"] == "lorenz63"
        assert back.meta["split_index"] == 9
        sidecar = json.loads((tmp_path / "series.json").read_text())
        assert sidecar["seed"] == 5

    def test_header_matches_contract(self, tmp_path):
        series = ObservationSeries(dt=0.5, values=np.zeros((3, 2)), meta={})
        path = tmp_path / "s.csv"
        write_series(series, path)
        assert path.read_text().splitlines()[0] == "t,x_0,x_1"

    def test_snapshot_binary_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((7, 5, 4))
        path = tmp_path / "snaps.bin"
        write_snapshots(path, arr)
        back, (nx, ny, n) = read_snapshots(path)
        assert np.array_equal(back, arr)
        assert (nx, ny, n) == (4, 5, 7)
