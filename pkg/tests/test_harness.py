import json
import os
import warnings
from dataclasses import replace

import numpy as np
import pytest

from mecoffload.config import PRESETS, EnvConfig, TrainConfig
from mecoffload.harness import (FINAL_WINDOW, MetricsTable, aggregate,
                                downsample, emit_plot_script, metrics_filename,
                                read_manifest, read_metrics_csv, run_checks,
                                run_compare_command, run_train_command,
                                run_training, run_user_sweep,
                                savgol_coefficients, smooth, write_manifest,
                                write_metrics_csv)
from mecoffload.trainer import CSV_COLUMNS, Policy
from mecoffload import cli


def tiny_env(**overrides):
    base = dict(num_users=2, num_servers=2, z_max=2, num_cpus=2,
                num_subchannels=2, server_storage_mb=100.0,
                slots_per_episode=4)
    base.update(overrides)
    return replace(PRESETS["smoke"].env, **base)


def tiny_train(**overrides):
    base = dict(episodes=5, updates_per_episode=1, batch_size=4)
    base.update(overrides)
    return replace(PRESETS["smoke"].train, **base)


def polyfit_oracle(series, window, polyorder):
    """Independent smoothing oracle: per-window numpy polyfit evaluation."""
    y = np.asarray(series, dtype=float)
    half = window // 2
    x = np.arange(window, dtype=float)
    out = np.empty_like(y)
    for i in range(half, y.size - half):
        coef = np.polyfit(x, y[i - half:i + half + 1], polyorder)
        out[i] = np.polyval(coef, half)
    head = np.polyfit(x, y[:window], polyorder)
    tail = np.polyfit(x, y[-window:], polyorder)
    for j in range(half):
        out[j] = np.polyval(head, j)
        out[y.size - half + j] = np.polyval(tail, window - half + j)
    return out


class TestSmooth:
    def test_interpolating_order_is_identity(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=40)
        assert smooth(y, window=5, polyorder=4) == pytest.approx(y, abs=1e-8)

    def test_constant_series_unchanged(self):
        y = np.full(60, 3.25)
        assert smooth(y, window=21, polyorder=3) == pytest.approx(y)

    def test_matches_dense_polyfit_oracle(self):
        rng = np.random.default_rng(1)
        for window, polyorder in [(5, 2), (9, 3), (21, 3)]:
            y = rng.normal(size=80).cumsum()
            got = smooth(y, window=window, polyorder=polyorder)
            want = polyfit_oracle(y, window, polyorder)
            assert got == pytest.approx(want, abs=1e-9)

    def test_short_series_passes_through_with_warning(self):
        y = np.arange(5.0)
        with pytest.warns(UserWarning):
            out = smooth(y, window=21, polyorder=3)
        assert np.array_equal(out, y)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            savgol_coefficients(4, 2)
        with pytest.raises(ValueError):
            savgol_coefficients(5, 5)

    def test_downsample_keeps_every_hundredth(self):
        y = np.arange(1000.0)
        kept = downsample(y, every=100)
        assert np.array_equal(kept, np.arange(0.0, 1000.0, 100.0))


class TestMetricsTable:
    def fake_log(self, episodes, reward):
        return [{**{c: 0.0 for c in CSV_COLUMNS}, "episode": e,
                 "mean_reward": reward} for e in range(1, episodes + 1)]

    def test_duplicate_keys_rejected(self):
        table = MetricsTable()
        table.add_run("ucms", 0, self.fake_log(3, -10.0))
        with pytest.raises(ValueError):
            table.add_run("ucms", 0, self.fake_log(3, -10.0))

    def test_aggregate_single_seed_has_zero_std(self):
        table = MetricsTable()
        table.add_run("ucms", 0, self.fake_log(3, -10.0))
        agg = aggregate(table)
        stats = agg["summary"]["ucms"]["per_episode"][1]["mean_reward"]
        assert stats == {"mean": -10.0, "std": 0.0}

    def test_aggregate_mean_of_two_seeds(self):
        table = MetricsTable()
        table.add_run("ucms", 0, self.fake_log(2, -10.0))
        table.add_run("ucms", 1, self.fake_log(2, -12.0))
        stats = aggregate(table)["summary"]["ucms"]["per_episode"][1]["mean_reward"]
        assert stats["mean"] == -11.0

    def test_aggregate_reports_smoothed_curves(self):
        table = MetricsTable()
        log = self.fake_log(250, 0.0)
        for row in log:
            row["mean_reward"] = float(row["episode"])
        table.add_run("ucms", 0, log)
        agg = aggregate(table)
        smoothed = agg["summary"]["ucms"]["smoothed"]["mean_reward"]
        # a linear series is reproduced exactly by the local polynomial fits
        assert np.array(smoothed["smoothed"]) == pytest.approx(
            np.arange(1.0, 251.0), abs=1e-8)
        assert len(smoothed["downsampled"]) == 3   # every 100th point

    def test_win_rate_matches_hand_count(self):
        table = MetricsTable()
        for seed, (r_ucms, r_rd) in enumerate([(-10, -12), (-11, -9), (-8, -20)]):
            table.add_run("ucms", seed, self.fake_log(4, r_ucms))
            table.add_run("rd_ucms", seed, self.fake_log(4, r_rd))
        agg = aggregate(table)
        assert agg["win_rates"]["rd_ucms"] == pytest.approx(2.0 / 3.0)

    def test_final_window_mean_uses_tail(self):
        table = MetricsTable()
        log = self.fake_log(100, 0.0)
        for row in log:
            row["mean_reward"] = float(row["episode"])
        table.add_run("ucms", 0, log)
        assert table.final_window_mean("ucms", 0, "mean_reward",
                                       window=10) == pytest.approx(95.5)


class TestCsvIO:
    def test_roundtrip(self, tmp_path):
        log = [{**{c: float(i) for c in CSV_COLUMNS}, "episode": i}
               for i in range(1, 4)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(str(path), log)
        assert read_metrics_csv(str(path)) == log

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            read_metrics_csv(str(path))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        env, tcfg = tiny_env(), tiny_train()
        write_manifest(str(tmp_path), "train", env, tcfg, ["ucms"], [3])
        doc = read_manifest(str(tmp_path / "manifest.json"))
        assert doc["env"] == env
        assert doc["train"] == tcfg
        assert doc["policies"] == ["ucms"]
        assert doc["seeds"] == [3]
        assert doc["command"] == "train"

    def test_rerun_from_manifest_is_bit_identical(self, tmp_path):
        env, tcfg = tiny_env(), tiny_train()
        dir_a, dir_b = str(tmp_path / "a"), str(tmp_path / "b")
        run_train_command(env, tcfg, Policy.UCMS, 2, dir_a,
                          write_checkpoint=False)
        doc = read_manifest(os.path.join(dir_a, "manifest.json"))
        run_train_command(doc["env"], doc["train"],
                          Policy.from_name(doc["policies"][0]),
                          doc["seeds"][0], dir_b, write_checkpoint=False)
        csv_a = open(os.path.join(dir_a, metrics_filename("ucms", 2)), "rb").read()
        csv_b = open(os.path.join(dir_b, metrics_filename("ucms", 2)), "rb").read()
        assert csv_a == csv_b


class TestRunDrivers:
    def test_train_command_writes_artifacts(self, tmp_path):
        out = str(tmp_path / "run")
        paths = run_train_command(tiny_env(), tiny_train(), Policy.UCMS, 0, out)
        assert os.path.exists(paths["csv"])
        assert os.path.exists(os.path.join(paths["checkpoint"], "bundle.json"))
        assert os.path.exists(os.path.join(out, "manifest.json"))
        rows = read_metrics_csv(paths["csv"])
        assert len(rows) == 5

    def test_compare_command_produces_summary(self, tmp_path):
        out = str(tmp_path / "cmp")
        agg = run_compare_command(tiny_env(), tiny_train(), ["ucms", "rd_ucms"],
                                  [0, 1], out)
        assert set(agg["summary"]) == {"ucms", "rd_ucms"}
        assert "rd_ucms" in agg["win_rates"]
        for policy in ("ucms", "rd_ucms"):
            for seed in (0, 1):
                assert os.path.exists(
                    os.path.join(out, metrics_filename(policy, seed)))

    def test_user_sweep_emits_one_row_per_count(self, tmp_path):
        out = str(tmp_path / "sweep")
        rows = run_user_sweep(tiny_env(), tiny_train(episodes=3), Policy.UCMS,
                              [2, 4], [0], out)
        assert [r["num_users"] for r in rows] == [2, 4]
        assert os.path.exists(os.path.join(out, "user_sweep.csv"))

    def test_training_run_is_seed_deterministic(self):
        logs = [run_training(tiny_env(), tiny_train(), Policy.UCMS, 7)
                for _ in range(2)]
        assert logs[0] == logs[1]


class TestCli:
    def test_train_subcommand(self, tmp_path, capsys):
        out = str(tmp_path / "cli_run")
        rc = cli.main(["train", "--preset", "smoke", "--seed", "1",
                       "--episodes", "3", "--out", out,
                       "--set", "num_users=2", "--set", "num_servers=2",
                       "--set", "z_max=2", "--set", "batch_size=4",
                       "--set", "slots_per_episode=4"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, metrics_filename("ucms", 1)))

    def test_train_rerun_from_manifest_identical(self, tmp_path):
        out_a = str(tmp_path / "a")
        args = ["train", "--preset", "smoke", "--seed", "3", "--episodes", "3",
                "--set", "num_users=2", "--set", "num_servers=2",
                "--set", "z_max=2", "--set", "batch_size=4",
                "--set", "slots_per_episode=4"]
        assert cli.main(args + ["--out", out_a]) == 0
        out_b = str(tmp_path / "b")
        rc = cli.main(["train", "--manifest", os.path.join(out_a, "manifest.json"),
                       "--out", out_b])
        assert rc == 0
        a = open(os.path.join(out_a, metrics_filename("ucms", 3)), "rb").read()
        b = open(os.path.join(out_b, metrics_filename("ucms", 3)), "rb").read()
        assert a == b

    def test_match_subcommand(self, tmp_path, capsys):
        instance = {"z_max": 2, "rho1": 1.0, "rho2": 0.5,
                    "delay_est": [[1.0, 3.0], [2.0, 4.0], [5.0, 1.0]],
                    "energy_est": [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]}
        path = tmp_path / "instance.json"
        path.write_text(json.dumps(instance))
        rc = cli.main(["match", str(path), "--verbose"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["assignment"] == {"0": 0, "1": 0, "2": 1}
        assert "rounds" in doc

    def test_check_subcommand_fast_subset(self, capsys):
        rc = cli.main(["check", "gradient-check"])
        assert rc == 0
        assert "[PASS] gradient-check" in capsys.readouterr().out

    def test_env_var_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MECOFFLOAD_RHO1", "1.0")
        monkeypatch.setenv("MECOFFLOAD_EPISODES", "2")
        out = str(tmp_path / "envrun")
        rc = cli.main(["train", "--preset", "smoke", "--seed", "0", "--out", out,
                       "--set", "num_users=2", "--set", "num_servers=2",
                       "--set", "z_max=2", "--set", "batch_size=4",
                       "--set", "slots_per_episode=4"])
        assert rc == 0
        doc = read_manifest(os.path.join(out, "manifest.json"))
        assert doc["env"].rho1 == 1.0
        assert doc["train"].episodes == 2

    def test_sweep_users_subcommand(self, tmp_path, capsys):
        out = str(tmp_path / "sweep_cli")
        rc = cli.main(["sweep-users", "--preset", "smoke", "--out", out,
                       "--episodes", "2", "--seeds", "1",
                       "--n-start", "2", "--n-stop", "4", "--n-step", "2",
                       "--set", "num_servers=2", "--set", "z_max=2",
                       "--set", "batch_size=4", "--set", "slots_per_episode=4"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "user_sweep.csv"))

    def test_emit_plot_script(self, tmp_path):
        out = str(tmp_path / "plots")
        os.makedirs(out)
        path = emit_plot_script(out)
        assert os.path.exists(path)
        compile(open(path).read(), path, "exec")

    def test_config_file_loading(self, tmp_path):
        cfg_doc = {"env": {"num_users": 2, "num_servers": 2, "z_max": 2,
                           "slots_per_episode": 4},
                   "train": {"episodes": 2, "batch_size": 4}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg_doc))
        out = str(tmp_path / "cfgrun")
        rc = cli.main(["train", "--config", str(cfg_path), "--seed", "0",
                       "--out", out])
        assert rc == 0
        doc = read_manifest(os.path.join(out, "manifest.json"))
        assert doc["env"].num_users == 2
        assert doc["train"].episodes == 2

    def test_compare_rerun_from_manifest_identical(self, tmp_path):
        common = ["--set", "num_users=2", "--set", "num_servers=2",
                  "--set", "z_max=2", "--set", "batch_size=4",
                  "--set", "slots_per_episode=4", "--episodes", "3"]
        out_a = str(tmp_path / "cmp_a")
        rc = cli.main(["compare", "--preset", "smoke", "--policies", "ucms",
                       "--seeds", "1", "--out", out_a] + common)
        assert rc == 0
        out_b = str(tmp_path / "cmp_b")
        rc = cli.main(["compare", "--manifest",
                       os.path.join(out_a, "manifest.json"), "--out", out_b])
        assert rc == 0
        a = open(os.path.join(out_a, metrics_filename("ucms", 0)), "rb").read()
        b = open(os.path.join(out_b, metrics_filename("ucms", 0)), "rb").read()
        assert a == b

    def test_check_fails_nonzero_on_violation(self, monkeypatch, capsys):
        from mecoffload import harness as hz
        monkeypatch.setitem(hz.CHECKS, "always-red",
                            lambda: (False, "forced failure"))
        rc = run_checks(["always-red"])
        assert rc == 1
        assert "[FAIL] always-red" in capsys.readouterr().out

    def test_verbose_train_writes_traces(self, tmp_path):
        out = str(tmp_path / "verbose_run")
        paths = run_train_command(tiny_env(), tiny_train(episodes=2),
                                  Policy.UCMS, 0, out, verbose=True)
        trace_path = os.path.join(paths["verbose"], "decisions.jsonl")
        hist_path = os.path.join(paths["verbose"], "priority_hist.csv")
        assert os.path.exists(trace_path) and os.path.exists(hist_path)
        lines = open(trace_path).read().splitlines()
        assert len(lines) == 2 * 4   # episodes x slots
        entry = json.loads(lines[0])
        assert set(entry) >= {"episode", "slot", "assignment", "offloaded",
                              "pre_decision", "local_freq_hz", "tx_power_dbm"}
        header = open(hist_path).readline().strip().split(",")
        assert header[:4] == ["episode", "round", "p_min", "p_max"]

    def test_stress_preset_wiring(self, tmp_path):
        out = str(tmp_path / "stress")
        rc = cli.main(["stress", "--out", out, "--episodes", "2",
                       "--policies", "ucms", "--seeds", "1",
                       "--set", "num_users=2", "--set", "num_servers=2",
                       "--set", "z_max=2", "--set", "batch_size=4",
                       "--slots", "6"])
        assert rc == 0
        doc = read_manifest(os.path.join(out, "manifest.json"))
        assert doc["env"].rho1 == 1.0 and doc["env"].rho2 == 5.0
        assert doc["env"].battery_max_mj == pytest.approx(1.0 / 1e6)
