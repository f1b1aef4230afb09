import csv
import json
import math

import numpy as np
import pytest

from passt import cli, knode, netcore, planner
from passt.grid import read_flowpack

WINDOW = {"n_rows": 8, "n_cols": 8, "cell_size": 1.25, "origin": [2.625, -4.375]}


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny flow pack, an untrained small model and a policy shared by the command tests."""
    root = tmp_path_factory.mktemp("ws")
    cfg = root / "gen.json"
    cfg.write_text(json.dumps({"preset": "stationary", "window": WINDOW, "n_steps": 40}))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "gen"), "--seed", "1"]) == 0
    pack = root / "gen" / "flow"
    assert cli.main(["train-model", "--pack", str(pack), "--out", str(root / "model"), "--seed", "2",
                     "--set", "architecture=\"small\"", "--set", "window=[0,6]", "--set", "train.epochs=2"]) == 0
    assert cli.main(["train-policy", "--out", str(root / "policy"), "--seed", "0", "--set", "n_maps=2",
                     "--set", "horizon=4", "--set", "grid_shape=[5,5]"]) == 0
    return {"root": root, "pack": pack, "model": root / "model" / "model", "policy": root / "policy" / "policy.json"}


class TestConfig:
    def test_overrides_reach_nested_tables(self):
        cfg = cli.apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c.d=[1, 2]", "name=plain"])
        assert cfg == {"a": {"b": 2, "c": {"d": [1, 2]}}, "name": "plain"}

    def test_override_errors(self):
        with pytest.raises(cli.ConfigError):
            cli.apply_overrides({}, ["novalue"])
        with pytest.raises(cli.ConfigError):
            cli.apply_overrides({"a": 1}, ["a.b=2"])

    def test_seed_precedence(self, monkeypatch):
        monkeypatch.setenv("PASST_SEED", "7")
        assert cli.resolve_seed({}, None) == 7
        assert cli.resolve_seed({"seed": 3}, None) == 3
        assert cli.resolve_seed({"seed": 3}, 5) == 5
        monkeypatch.delenv("PASST_SEED")
        assert cli.resolve_seed({}) == 0
        monkeypatch.setenv("PASST_SEED", "x")
        with pytest.raises(cli.ConfigError):
            cli.resolve_seed({})

    def test_bad_json_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_key_exit_code(self, tmp_path):
        assert cli.main(["train-policy", "--out", str(tmp_path / "o"), "--set", "n_mapz=3"]) == 2


class TestGen:
    def test_pack_and_manifest(self, workspace):
        run = workspace["root"] / "gen"
        s = read_flowpack(workspace["pack"])
        assert s.data.shape == (40, 8, 8, 2)
        man = cli.RunManifest.read(run)
        assert man.command == "gen" and man.seeds == {"seed": 1}
        assert man.outputs["flow"] == cli.content_hash(workspace["pack"])
        assert man.verify_inputs()

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PASST_SEED", "1")
        args = ["gen", "--set", f"window={json.dumps(WINDOW)}", "--set", "n_steps=40"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        monkeypatch.delenv("PASST_SEED")
        assert cli.main(args + ["--out", str(tmp_path / "b"), "--seed", "1"]) == 0
        assert cli.content_hash(tmp_path / "a" / "flow") == cli.content_hash(tmp_path / "b" / "flow")

    def test_append_only(self, workspace):
        assert cli.main(["gen", "--out", str(workspace["root"] / "gen")]) == 2

    def test_unknown_preset(self, tmp_path):
        assert cli.main(["gen", "--out", str(tmp_path / "o"), "--set", "preset=\"wavy\""]) == 2


class TestIngest:
    def test_round_trip(self, tmp_path):
        files = []
        for t in range(2):
            lines = ["row,col,u,v"] + [f"{r},{c},{r + t},{-c}" for r in range(2) for c in range(3)]
            f = tmp_path / f"s{t}.csv"
            f.write_text("\n".join(lines) + "\n")
            files.append(str(f))
        out = tmp_path / "out"
        assert cli.main(["ingest", *files, "--out", str(out), "--set", "n_rows=2", "--set", "n_cols=3"]) == 0
        s = read_flowpack(out / "flow")
        assert s.data[1, 1, 2].tolist() == [2.0, -2.0]
        assert set(cli.RunManifest.read(out).inputs) == set(files)

    def test_gap_is_data_error(self, tmp_path):
        f = tmp_path / "s.csv"
        f.write_text("row,col,u,v\n0,0,1,1\n")
        g = tmp_path / "t.csv"
        g.write_text("row,col,u,v\n0,0,1,1\n0,1,1,1\n1,0,1,1\n1,1,1,1\n")
        args = ["ingest", str(f), str(g), "--out", str(tmp_path / "o"), "--set", "n_rows=2", "--set", "n_cols=2"]
        assert cli.main(args) == 3

    def test_missing_file(self, tmp_path):
        args = ["ingest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o"), "--set", "n_rows=2",
                "--set", "n_cols=2"]
        assert cli.main(args) == 3


class TestTrain:
    def test_zero_epochs_gives_init(self, workspace, tmp_path):
        args = ["train-model", "--pack", str(workspace["pack"]), "--out", str(tmp_path / "m"), "--seed", "9",
                "--set", "architecture=\"small\"", "--set", "window=[0,6]", "--set", "train.epochs=0"]
        assert cli.main(args) == 0
        m, man = knode.load_model(tmp_path / "m" / "model")
        assert m.params == netcore.init_params(netcore.small_architecture(8, 8), 9)
        assert man["epoch"] == 0 and man["train_config"]["rng_seed"] == 9

    def test_trained_model_history(self, workspace):
        m, man = knode.load_model(workspace["model"])
        assert man["loss_epochs"] == [0, 1, 2]
        assert m.params != netcore.init_params(m.arch, 2)

    def test_divergence_exit_code(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setattr(knode, "DIVERGENCE_LIMIT", 1e-6)
        args = ["train-model", "--pack", str(workspace["pack"]), "--out", str(tmp_path / "m"),
                "--set", "architecture=\"small\"", "--set", "window=[0,6]", "--set", "train.epochs=1"]
        assert cli.main(args) == 4

    def test_policy_zero_learning_rate(self, tmp_path):
        args = ["train-policy", "--out", str(tmp_path / "p"), "--set", "n_maps=2", "--set", "horizon=3",
                "--set", "grid_shape=[4,4]", "--set", "learning_rate=0.0"]
        assert cli.main(args) == 0
        assert planner.load_policy(tmp_path / "p" / "policy.json") == planner.PolicyParams.zeros()

    def test_policy_same_seed_same_file(self, workspace, tmp_path):
        args = ["train-policy", "--out", str(tmp_path / "p"), "--seed", "0", "--set", "n_maps=2",
                "--set", "horizon=4", "--set", "grid_shape=[5,5]"]
        assert cli.main(args) == 0
        assert (tmp_path / "p" / "policy.json").read_bytes() == workspace["policy"].read_bytes()

    def test_policy_evaluation_csv(self, tmp_path):
        args = ["train-policy", "--out", str(tmp_path / "p"), "--set", "n_maps=2", "--set", "horizon=3",
                "--set", "grid_shape=[4,4]", "--set", "evaluate=true"]
        assert cli.main(args) == 0
        rows = _csv(tmp_path / "p" / "policy_eval.csv")
        assert rows[0] == ["greedy_J", "random_walk_J", "ratio"] and len(rows) == 2


class TestEvalAndRun:
    def test_eval(self, workspace, tmp_path):
        args = ["eval", "--model", str(workspace["model"]), "--pack", str(workspace["pack"]), "--out",
                str(tmp_path / "e"), "--set", "window=[10,30]", "--set", "lookaheads=[1,2,5]"]
        assert cli.main(args) == 0
        rows = _csv(tmp_path / "e" / "lookahead.csv")
        assert [r[0] for r in rows[1:]] == ["1", "2", "5"]
        assert _csv(tmp_path / "e" / "pod_truth.csv")[0][0] == "mode"

    def _run(self, workspace, out, *extra):
        return cli.main(["run", "--model", str(workspace["model"]), "--policy", str(workspace["policy"]),
                         "--pack", str(workspace["pack"]), "--out", str(out), "--seed", "4", "--n-trials", "2",
                         "--set", "truth_start=0", "--set", "pod_steps=[2,10]", "--set", "loop.total_steps=12",
                         "--set", "loop.path_horizon=4", *extra])

    def test_run_outputs_and_determinism(self, workspace, tmp_path):
        assert self._run(workspace, tmp_path / "a") == 0
        assert self._run(workspace, tmp_path / "b") == 0
        for name in ("summary.csv", "trial_000", "trial_001", "baseline"):
            assert cli.content_hash(tmp_path / "a" / name) == cli.content_hash(tmp_path / "b" / name)
        rows = _csv(tmp_path / "a" / "summary.csv")
        assert rows[0][:4] == ["trial", "seed", "passt_mean_rmse", "baseline_mean_rmse"]
        assert [r[1] for r in rows[1:]] == ["4", "5"]
        man = cli.RunManifest.read(tmp_path / "a")
        assert man.verify_inputs() and set(man.outputs) == {"baseline", "trial_000", "trial_001", "summary.csv"}

    def test_run_grid_mismatch_is_data_error(self, workspace, tmp_path):
        assert cli.main(["gen", "--out", str(tmp_path / "g"), "--set", "n_steps=20", "--set",
                         "window={\"n_rows\": 6, \"n_cols\": 6, \"cell_size\": 1.5, \"origin\": [2.75, -4.25]}"]) == 0
        args = ["run", "--model", str(workspace["model"]), "--policy", str(workspace["policy"]), "--pack",
                str(tmp_path / "g" / "flow"), "--out", str(tmp_path / "r")]
        assert cli.main(args) == 3

    def test_run_config_errors(self, workspace, tmp_path):
        assert self._run(workspace, tmp_path / "a", "--set", "loop.world=\"paused\"") == 2
        assert self._run(workspace, tmp_path / "b", "--set", "pod_steps=[5,50]") == 2
        assert self._run(workspace, tmp_path / "c", "--set", "extra=1") == 2


class TestExportPlots:
    def _fake_run(self, root):
        curves = {"trial_000": [0.0, 1.0, 2.0], "trial_001": [0.0, 3.0, 4.0], "baseline": [0.0, 5.0, 6.5]}
        for name, vals in curves.items():
            d = root / name
            d.mkdir(parents=True)
            lines = ["step,robot_row,robot_col,rmse_vs_truth,cycle_id"] + [f"{t},0,0,{v!r},0" for t, v in
                                                                           enumerate(vals)]
            (d / "trace.csv").write_text("\n".join(lines) + "\n")
        return root

    def test_golden_rmse_csv(self, tmp_path):
        run = self._fake_run(tmp_path / "run")
        assert cli.main(["export-plots", str(run)]) == 0
        s2 = repr(math.sqrt(2.0))
        expected = ("step,mean_rmse,std_rmse,n_trials,baseline_rmse\n"
                    "0,0.0,0.0,2,0.0\n"
                    f"1,2.0,{s2},2,5.0\n"
                    f"2,3.0,{s2},2,6.5\n")
        assert (run / "plots" / "rmse_vs_step.csv").read_text() == expected
        assert (run / "plots" / "pod_curves.csv").read_text() == "source,mode,cumulative_energy\n"

    def test_export_real_run(self, workspace, tmp_path):
        assert TestEvalAndRun()._run(workspace, tmp_path / "r") == 0
        assert cli.main(["export-plots", str(tmp_path / "r"), "--out", str(tmp_path / "plots")]) == 0
        rows = _csv(tmp_path / "plots" / "pod_curves.csv")
        assert {r[0] for r in rows[1:]} == {"trial_000", "trial_001", "baseline"}
        assert len(_csv(tmp_path / "plots" / "rmse_vs_step.csv")) == 14
        assert cli.RunManifest.read(tmp_path / "plots").verify_inputs()

    def test_lookahead_curves(self, tmp_path):
        d = tmp_path / "run" / "eval"
        d.mkdir(parents=True)
        (d / "lookahead.csv").write_text("lookahead,mse,cosine_distance,dataset\n1,0.5,0.1,test\n")
        assert cli.main(["export-plots", str(tmp_path / "run")]) == 0
        assert _csv(tmp_path / "run" / "plots" / "lookahead_curves.csv") == [
            ["report", "lookahead", "mse", "cosine_distance", "dataset"], ["eval", "1", "0.5", "0.1", "test"]]

    def test_empty_directory_is_data_error(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli.main(["export-plots", str(tmp_path / "empty")]) == 3
        assert cli.main(["export-plots", str(tmp_path / "missing")]) == 3


def test_content_hash_ignores_manifest(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    before = cli.content_hash(tmp_path)
    cli.RunManifest("gen", None, {}, {}).write(tmp_path)
    assert cli.content_hash(tmp_path) == before
    (tmp_path / "a.txt").write_text("y")
    assert cli.content_hash(tmp_path) != before
