"""End-to-end tests for the command-line front end: config parsing with a
strict schema, the six subcommands, exit-code conventions (0 ok,
2 constraints unmet, 3 blowup-dominated evaluation, 4 config error),
output-directory override via the environment, and byte-level determinism
of the simulate -> train -> evaluate pipeline."""

import json

import numpy as np
import pytest

from lqembed.cli import main
from lqembed.embedtools import DelaySpec, fit_delay_edmd, save_edmd
from lqembed.lqm import DenseQuad, LQModel
from lqembed.systems import ObservationSeries, read_series, write_series
from lqembed.train import (
    LatentTable,
    TrainConfig,
    TrainReport,
    init_latent,
    load_checkpoint,
    save_checkpoint,
)

TINY = {
    "system": {"name": "lorenz63", "dt": 0.01, "n_steps": 80, "transient": 10},
    "train": {"d_E": 3, "r": 1, "mode": "unconstrained", "epochs": 3,
              "learning_rate": 0.001, "chunk_length": 64,
              "assimilation_window": 4, "assimilation_iters": 5},
    "metrics": {"horizons": [1, 2], "n_starts": 3, "probe_scales": [1.0],
                "probe_trials": 4, "probe_steps": 40, "lyap_steps": 120,
                "forecast_steps": 12},
    "seed": 0,
}


def write_config(tmp_path, name="exp.json", **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(tmp_path / "out")
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path, cfg


class TestConfigHandling:
    def test_missing_file_is_config_error(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 4

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path, _ = write_config(tmp_path, typo_key=1)
        assert main(["simulate", "--config", str(path)]) == 4

    def test_unknown_train_key_rejected(self, tmp_path):
        path, _ = write_config(tmp_path, train={"learning_rte": 0.1})
        assert main(["train", "--config", str(path)]) == 4

    def test_unknown_metrics_key_rejected(self, tmp_path):
        path, _ = write_config(tmp_path, metrics={"horzons": [1]})
        assert main(["evaluate", "--config", str(path)]) == 4

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path)]) == 4

    def test_unknown_preset_rejected(self):
        assert main(["simulate", "--config", "no_such_preset"]) == 4

    def test_usage_errors_exit_4(self):
        assert main([]) == 4
        assert main(["bogus-subcommand"]) == 4
        assert main(["simulate"]) == 4      # --config is required

    def test_output_dir_env_override(self, tmp_path, monkeypatch):
        path, _ = write_config(tmp_path)
        override = tmp_path / "elsewhere"
        monkeypatch.setenv("LQEMBED_OUTPUT_DIR", str(override))
        assert main(["simulate", "--config", str(path)]) == 0
        assert (override / "series.csv").exists()
        assert not (tmp_path / "out" / "series.csv").exists()


class TestSimulate:
    def test_writes_series_with_split(self, tmp_path):
        path, cfg = write_config(tmp_path)
        assert main(["simulate", "--config", str(path)]) == 0
        series = read_series(tmp_path / "out" / "series.csv")
        assert series.values.shape == (80, 1)
        assert series.meta["split_index"] == 64
        assert series.dt == 0.01

    def test_zero_steps_is_config_error(self, tmp_path):
        path, _ = write_config(tmp_path, system={"n_steps": 0})
        assert main(["simulate", "--config", str(path)]) == 4

    def test_lorenz63_preset_shape(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LQEMBED_OUTPUT_DIR", str(tmp_path / "p"))
        assert main(["simulate", "--config", "lorenz63"]) == 0
        series = read_series(tmp_path / "p" / "series.csv")
        assert series.values.shape == (5000, 1)
        assert series.meta["split_index"] == 4000


class TestEmbedParams:
    def test_writes_table(self, tmp_path, capsys):
        path, _ = write_config(tmp_path,
                               system={"n_steps": 600, "transient": 100})
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["embed-params", "--config", str(path)]) == 0
        rows = (tmp_path / "out" / "embed_params.csv").read_text().splitlines()
        assert rows[0] == "quantity,value"
        table = dict(line.split(",") for line in rows[1:])
        assert set(table) == {"tau_mi", "tau_corr", "d_fnn", "d_whitney"}
        assert all(int(v) >= 1 for v in table.values())
        assert int(table["d_whitney"]) == 2 * int(table["d_fnn"]) + 1
        out = capsys.readouterr().out
        assert "tau_mi" in out

    def test_needs_series(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["embed-params", "--config", str(path)]) == 4


class TestTrain:
    def test_checkpoint_written(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 0
        ckpt = tmp_path / "out" / "checkpoint"
        for name in ("model.json", "latent.csv", "report.json", "config.json"):
            assert (ckpt / name).exists()
        report = json.loads((ckpt / "report.json").read_text())
        assert report["wall_clock"] == 0.0     # kept deterministic on disk

    def test_constrained_unmet_exits_2(self, tmp_path):
        # zero epochs leaves the zero-initialized model, whose shifted
        # symmetric part has eigenvalue 0: not strictly stable
        path, _ = write_config(tmp_path,
                               train={"mode": "constrained", "epochs": 0})
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 2
        _, _, report, _ = load_checkpoint(tmp_path / "out" / "checkpoint")
        assert report.constraints_unmet

    def test_zero_epochs_checkpoint_is_initialization(self, tmp_path):
        path, cfg = write_config(tmp_path, train={"epochs": 0})
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 0
        model, table, _, tcfg = load_checkpoint(tmp_path / "out" / "checkpoint")
        assert np.all(model.c == 0.0) and np.all(model.L == 0.0)
        assert np.all(model.quad.get_flat() == 0.0)
        series = read_series(tmp_path / "out" / "series.csv")
        split = series.meta["split_index"]
        train_split = ObservationSeries(series.dt, series.values[:split])
        assert model.m[0] == pytest.approx(train_split.values.mean())
        want = init_latent(train_split, tcfg)
        assert np.array_equal(table.entries, want.entries)

    def test_override_flags_reach_checkpoint(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["simulate", "--config", str(path)]) == 0
        code = main(["train", "--config", str(path), "--epochs", "1",
                     "--mode", "constrained", "--seed", "5"])
        assert code in (0, 2)
        saved = json.loads((tmp_path / "out" / "checkpoint"
                            / "config.json").read_text())
        assert saved["epochs"] == 1
        assert saved["mode"] == "constrained"
        assert saved["seed"] == 5

    def test_train_without_series_is_config_error(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["train", "--config", str(path)]) == 4


class TestForecastAndEvaluate:
    def prepared(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 0
        return path

    def test_forecast_writes_series(self, tmp_path):
        path = self.prepared(tmp_path)
        assert main(["forecast", "--config", str(path)]) == 0
        fc = read_series(tmp_path / "out" / "forecast.csv")
        assert fc.values.shape == (12, 1)
        assert fc.meta["start_index"] == 63    # last training row

    def test_evaluate_writes_reports(self, tmp_path):
        path = self.prepared(tmp_path)
        assert main(["evaluate", "--config", str(path)]) == 0
        eval_dir = tmp_path / "out" / "eval"
        assert (eval_dir / "metrics.txt").exists()
        rows = np.loadtxt(eval_dir / "horizon_rmse.csv", delimiter=",",
                          skiprows=1, ndmin=2)
        assert rows.shape == (2, 3)            # horizon, rmse, blowups
        assert np.array_equal(rows[:, 0], [1, 2])
        probes = np.loadtxt(eval_dir / "probes.csv", delimiter=",",
                            skiprows=1, ndmin=2)
        assert probes.shape[1] == 4            # scale, fraction, escapes, max
        assert 0.0 <= probes[0, 1] <= 1.0

    def test_blowup_dominated_evaluation_exits_3(self, tmp_path):
        path, _ = write_config(tmp_path, train={"d_E": 1, "r": 1})
        assert main(["simulate", "--config", str(path)]) == 0
        out = tmp_path / "out"
        tcfg = TrainConfig(d_E=1, r=1, assimilation_window=4)
        quad = DenseQuad(1)
        model = LQModel(1, np.zeros(1), np.array([[5000.0]]), quad,
                        np.zeros(1))
        table = LatentTable(np.zeros((64, 0)), r=1)
        save_checkpoint(out / "checkpoint", model, table,
                        TrainReport(seed=0, mode="unconstrained", epochs=0),
                        tcfg)
        assert main(["evaluate", "--config", str(path)]) == 3

    def test_evaluate_missing_checkpoint_is_config_error(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["evaluate", "--config", str(path)]) == 4

    def test_evaluate_edmd_checkpoint_flags_fixed_point(self, tmp_path):
        path, _ = write_config(tmp_path)
        out = tmp_path / "out"
        out.mkdir()
        t = np.arange(400.0)
        x = 0.98 ** t * np.sin(0.3 * t)
        series = ObservationSeries(dt=0.1, values=x[:, None],
                                   meta={"split_index": 320})
        write_series(series, out / "series.csv")
        model = fit_delay_edmd(x[:320], DelaySpec(lag=2, dim=6), svd_rank=2)
        save_edmd(out / "edmd.bin", model)
        code = main(["evaluate", "--config", str(path), "--checkpoint",
                     str(out / "edmd.bin")])
        assert code == 0
        text = (out / "eval" / "metrics.txt").read_text()
        assert "fixed point" in text


class TestGradcheck:
    def test_default_passes(self, tmp_path, capsys):
        path, _ = write_config(tmp_path)
        assert main(["gradcheck", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "pass" in out
        assert "FAIL" not in out

    def test_corrupted_gradient_fails(self, tmp_path, capsys):
        path, _ = write_config(tmp_path)
        assert main(["gradcheck", "--config", str(path), "--corrupt"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestDeterminism:
    def test_pipeline_is_byte_identical(self, tmp_path, monkeypatch):
        files = ["series.csv", "series.json", "checkpoint/model.json",
                 "checkpoint/latent.csv", "checkpoint/report.json",
                 "checkpoint/config.json", "eval/metrics.txt",
                 "eval/horizon_rmse.csv", "eval/probes.csv",
                 "forecast.csv"]
        blobs = {}
        for run in ("a", "b"):
            root = tmp_path / run
            path, _ = write_config(tmp_path, name=f"exp_{run}.json",
                                   output_dir=str(root / "out"))
            for cmd in ("simulate", "train", "forecast", "evaluate"):
                assert main([cmd, "--config", str(path)]) in (0, 2, 3)
            blobs[run] = {f: (root / "out" / f).read_bytes() for f in files}
        for f in files:
            assert blobs["a"][f] == blobs["b"][f], f
