import time

import numpy as np
import pytest
from click.testing import CliRunner

from softreach.artifacts import read_json, sha256_file
from softreach.cli import main
from softreach.dataset import Run
from softreach.ppo import TrainingCurve


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def ok(*args):
    res = invoke(*args)
    assert res.exit_code == 0, res.output
    return res


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Small pipeline artifacts built through the CLI itself."""
    root = tmp_path_factory.mktemp("tiny")
    ok("explore", "--steps", 60, "--seed", 3, "--out", root / "press_a")
    ok("explore", "--steps", 60, "--seed", 4, "--out", root / "press_b")
    for tag in ("a", "b"):
        ok(
            "collect",
            "--pressures", root / f"press_{tag}" / "pressures.csv",
            "--run-id", f"run_{tag}",
            "--seed", 11,
            "--out", root / f"run_{tag}",
        )
    ok(
        "build-dataset",
        root / "run_a" / "run.csv",
        root / "run_b" / "run.csv",
        "--window", 16,
        "--step", 8,
        "--out", root / "dataset",
    )
    ok(
        "train-model",
        "--dataset", root / "dataset" / "dataset.json",
        "--hidden-size", 8,
        "--steps", 40,
        "--batch-size", 4,
        "--val-every", 20,
        "--out", root / "model",
    )
    return root


class TestExplore:
    def test_flag_regime_writes_requested_rows(self, tmp_path):
        res = ok(
            "explore", "--alpha", 0.9, "--beta", 0.1, "--pmax", 13, "--pb", 2,
            "--valves", 3, "--steps", 400, "--seed", 7, "--out", tmp_path,
        )
        assert "400" in res.output
        lines = (tmp_path / "pressures.csv").read_text().splitlines()
        assert lines[0] == "step,p1_kpa,p2_kpa,p3_kpa"
        assert len(lines) == 401
        doc = read_json(tmp_path / "manifest.json")
        assert doc["command"] == "explore"
        assert doc["seed"] == 7
        assert doc["config"]["exploration"]["alpha"] == 0.9

    def test_zero_steps_is_usage_error(self, tmp_path):
        res = invoke("explore", "--steps", 0, "--out", tmp_path)
        assert res.exit_code == 2
        assert "n_steps" in res.output

    def test_same_flags_twice_identical_bytes(self, tmp_path):
        for sub in ("one", "two"):
            ok("explore", "--steps", 50, "--seed", 9, "--out", tmp_path / sub)
        assert (tmp_path / "one" / "pressures.csv").read_bytes() == (
            tmp_path / "two" / "pressures.csv"
        ).read_bytes()
        assert (tmp_path / "one" / "manifest.json").read_bytes() == (
            tmp_path / "two" / "manifest.json"
        ).read_bytes()

    def test_flag_beats_config_beats_default(self, tmp_path):
        from softreach.artifacts import write_json

        cfg = tmp_path / "cfg.json"
        write_json(cfg, {"exploration": {"alpha": 0.5, "n_steps": 30}})
        ok("explore", "--config", cfg, "--out", tmp_path / "a")
        echoed = read_json(tmp_path / "a" / "manifest.json")["config"]["exploration"]
        assert echoed["alpha"] == 0.5 and echoed["n_steps"] == 30
        ok("explore", "--config", cfg, "--alpha", 0.7, "--out", tmp_path / "b")
        echoed = read_json(tmp_path / "b" / "manifest.json")["config"]["exploration"]
        assert echoed["alpha"] == 0.7 and echoed["n_steps"] == 30

    def test_manifest_reruns_byte_identically(self, tmp_path):
        ok("explore", "--steps", 35, "--seed", 5, "--noise-std", 1.5, "--out", tmp_path / "a")
        ok("explore", "--config", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "pressures.csv").read_bytes() == (
            tmp_path / "b" / "pressures.csv"
        ).read_bytes()


class TestCollect:
    def test_noiseless_rollout_reproducible(self, tmp_path):
        ok("explore", "--steps", 25, "--seed", 2, "--out", tmp_path / "p")
        for sub in ("one", "two"):
            ok(
                "collect",
                "--pressures", tmp_path / "p" / "pressures.csv",
                "--noise-std", 0.0,
                "--out", tmp_path / sub,
            )
        assert (tmp_path / "one" / "run.csv").read_bytes() == (
            tmp_path / "two" / "run.csv"
        ).read_bytes()

    def test_alignment_matches_nearest_timestamp_rule(self, tmp_path):
        #  pressure rows at t=0,1; mocap at t=0.4 (nearer 0) and t=0.6 (nearer 1)
        plog = tmp_path / "press.csv"
        plog.write_text("t_s,p1_kpa,p2_kpa,p3_kpa\n0.0,1.0,2.0,3.0\n1.0,4.0,5.0,6.0\n")
        mlog = tmp_path / "mocap.csv"
        mlog.write_text("t_s,x_mm,y_mm,z_mm\n0.4,10.0,11.0,12.0\n0.6,13.0,14.0,15.0\n")
        ok("collect", "--pressure-log", plog, "--mocap-log", mlog, "--out", tmp_path / "o")
        run = Run.from_csv(tmp_path / "o" / "run.csv")
        np.testing.assert_array_equal(run.t, [0.4, 0.6])
        np.testing.assert_array_equal(run.p, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        np.testing.assert_array_equal(run.pos, [[10.0, 11.0, 12.0], [13.0, 14.0, 15.0]])

    def test_missing_input_exits_2(self, tmp_path):
        res = invoke("collect", "--pressures", tmp_path / "nope.csv", "--out", tmp_path)
        assert res.exit_code == 2
        assert "nope.csv" in res.output

    def test_malformed_csv_names_line(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("step,p1_kpa,p2_kpa,p3_kpa\n0,1,2,3\n1,x,2,3\n")
        res = invoke("collect", "--pressures", bad, "--out", tmp_path / "o")
        assert res.exit_code == 2
        assert "line 3" in res.output

    def test_requires_exactly_one_mode(self, tmp_path):
        res = invoke("collect", "--out", tmp_path)
        assert res.exit_code == 2
        plog = tmp_path / "p.csv"
        plog.write_text("t_s,p1_kpa\n0,1\n")
        res = invoke("collect", "--pressure-log", plog, "--out", tmp_path)
        assert res.exit_code == 2


class TestBuildDataset:
    def test_rerun_byte_identical(self, tiny, tmp_path):
        for sub in ("one", "two"):
            ok(
                "build-dataset",
                tiny / "run_a" / "run.csv",
                tiny / "run_b" / "run.csv",
                "--window", 16, "--step", 8,
                "--out", tmp_path / sub,
            )
        assert (tmp_path / "one" / "dataset.json").read_bytes() == (
            tmp_path / "two" / "dataset.json"
        ).read_bytes()

    def test_window_longer_than_run_exits_2(self, tiny, tmp_path):
        res = invoke(
            "build-dataset", tiny / "run_a" / "run.csv", "--window", 500, "--out", tmp_path
        )
        assert res.exit_code == 2
        assert "needs >=" in res.output

    def test_duplicate_run_ids_rejected(self, tiny, tmp_path):
        res = invoke(
            "build-dataset",
            tiny / "run_a" / "run.csv",
            tiny / "run_a" / "run.csv",
            "--window", 16,
            "--out", tmp_path,
        )
        assert res.exit_code == 2
        assert "duplicate" in res.output


class TestTrainModel:
    def test_artifacts_written(self, tiny):
        out = tiny / "model"
        assert (out / "model.json").exists()
        assert (out / "train_report.csv").exists()
        doc = read_json(out / "manifest.json")
        assert doc["command"] == "train-model"
        assert doc["config"]["forward_model"]["hidden_size"] == 8

    def test_manifest_rerun_reproduces_model_bytes(self, tiny, tmp_path):
        ok(
            "train-model",
            "--dataset", tiny / "dataset" / "dataset.json",
            "--config", tiny / "model" / "manifest.json",
            "--out", tmp_path,
        )
        assert (tmp_path / "model.json").read_bytes() == (tiny / "model" / "model.json").read_bytes()
        assert (tmp_path / "train_report.csv").read_bytes() == (
            tiny / "model" / "train_report.csv"
        ).read_bytes()

    def test_inputs_are_not_mutated(self, tiny, tmp_path):
        inputs = [
            tiny / "dataset" / "dataset.json",
            tiny / "run_a" / "run.csv",
            tiny / "run_b" / "run.csv",
        ]
        before = [sha256_file(p) for p in inputs]
        ok(
            "train-model",
            "--dataset", tiny / "dataset" / "dataset.json",
            "--hidden-size", 8, "--steps", 10, "--batch-size", 4, "--val-every", 10,
            "--out", tmp_path,
        )
        assert [sha256_file(p) for p in inputs] == before


class TestTrainPolicy:
    def test_single_seed_artifacts(self, tiny, tmp_path):
        res = ok(
            "train-policy",
            "--model", tiny / "model" / "model.json",
            "--updates", 2, "--n-envs", 2, "--rollout-length", 8, "--max-steps", 8,
            "--out", tmp_path,
        )
        assert (tmp_path / "policy.json").exists()
        curve = TrainingCurve.from_csv(tmp_path / "curve.csv")
        assert curve.n_updates == 2
        doc = read_json(tmp_path / "manifest.json")
        assert doc["config"]["ppo"]["total_updates"] == 2
        assert doc["config"]["environment"]["max_steps"] == 8

    def test_multi_seed_writes_aggregate(self, tiny, tmp_path):
        ok(
            "train-policy",
            "--model", tiny / "model" / "model.json",
            "--updates", 1, "--n-envs", 2, "--rollout-length", 8, "--max-steps", 8,
            "--seeds", "4,5",
            "--out", tmp_path,
        )
        for name in ("policy_seed4.json", "curve_seed4.csv", "policy_seed5.json",
                     "curve_seed5.csv", "curve_aggregate.csv"):
            assert (tmp_path / name).exists()
        header = (tmp_path / "curve_aggregate.csv").read_text().splitlines()[0]
        assert header == "update,mean_return,std_return,band_low,band_high,mean_terminal_dist_mm"


class TestEvaluate:
    def test_open_loop_mode(self, tiny, tmp_path):
        res = ok(
            "evaluate",
            "--model", tiny / "model" / "model.json",
            "--run", tiny / "run_a" / "run.csv",
            "--out", tmp_path,
        )
        assert "open-loop RMSE" in res.output
        doc = read_json(tmp_path / "evaluation.json")
        assert doc["mode"] == "open_loop"
        assert doc["rmse_mm"] >= 0

    def test_reaching_mode(self, tiny, tmp_path):
        ok(
            "train-policy",
            "--model", tiny / "model" / "model.json",
            "--updates", 1, "--n-envs", 2, "--rollout-length", 8, "--max-steps", 8,
            "--out", tmp_path / "pol",
        )
        ok(
            "evaluate",
            "--model", tiny / "model" / "model.json",
            "--policy", tmp_path / "pol" / "policy.json",
            "--episodes", 3, "--max-steps", 8,
            "--out", tmp_path / "ev",
        )
        doc = read_json(tmp_path / "ev" / "evaluation.json")
        assert doc["mode"] == "reaching"
        assert doc["n_episodes"] == 3
        assert 0.0 <= doc["success_rate"] <= 1.0

    def test_missing_model_is_clear_error(self, tiny, tmp_path):
        res = invoke(
            "evaluate", "--model", tmp_path / "absent.json",
            "--run", tiny / "run_a" / "run.csv", "--out", tmp_path,
        )
        assert res.exit_code == 2
        assert "absent.json" in res.output

    def test_requires_exactly_one_mode(self, tiny, tmp_path):
        res = invoke("evaluate", "--model", tiny / "model" / "model.json", "--out", tmp_path)
        assert res.exit_code == 2
        assert "exactly one" in res.output


class TestMisc:
    def test_version(self):
        res = ok("--version")
        assert "softreach" in res.output


class TestSmoke:
    def test_end_to_end_under_desk_budget(self, tmp_path):
        """Full pipeline at reduced-but-honest scale inside 15 minutes."""
        t0 = time.monotonic()
        ok(
            "explore", "--alpha", 0.9, "--beta", 0.1, "--pmax", 13, "--pb", 2,
            "--valves", 3, "--steps", 400, "--seed", 7, "--out", tmp_path / "press",
        )
        ok(
            "collect", "--pressures", tmp_path / "press" / "pressures.csv",
            "--seed", 21, "--out", tmp_path / "run",
        )
        ok(
            "build-dataset", tmp_path / "run" / "run.csv",
            "--window", 256, "--step", 4, "--out", tmp_path / "data",
        )
        ok(
            "train-model", "--dataset", tmp_path / "data" / "dataset.json",
            "--steps", 2000, "--out", tmp_path / "model",
        )
        ok(
            "train-policy", "--model", tmp_path / "model" / "model.json",
            "--updates", 50, "--out", tmp_path / "policy",
        )
        ok(
            "evaluate", "--model", tmp_path / "model" / "model.json",
            "--policy", tmp_path / "policy" / "policy.json",
            "--episodes", 10, "--out", tmp_path / "eval",
        )
        elapsed = time.monotonic() - t0
        assert elapsed < 900.0, f"pipeline took {elapsed:.0f}s"
        doc = read_json(tmp_path / "eval" / "evaluation.json")
        assert np.isfinite(doc["mean_terminal_dist_mm"])
