"""Tests for the command-line surface: artifacts, determinism, exit codes."""

import numpy as np
import pytest

from fxpquant.cli import main


class TestStatsCommands:
    def test_sweep_writes_expected_schemas(self, tmp_path):
        rc = main(
            ["--seed", "1", "--out", str(tmp_path), "stats-sweep", "--signed",
             "--sigma-min", "0.1", "--sigma-max", "40", "--points", "10",
             "--samples", "2000"]
        )
        assert rc == 0
        grid = (tmp_path / "sweep_grid.csv").read_text()
        amin = (tmp_path / "sweep_argmin.csv").read_text()
        assert grid.splitlines()[0] == "sigma,fl,relative_error"
        assert amin.splitlines()[0] == "sigma,opt_fl,min_error"
        assert grid.endswith("\n") and amin.endswith("\n")

    def test_signed_sweep_min_error_under_one_percent(self, tmp_path):
        rc = main(
            ["--seed", "2", "--out", str(tmp_path), "stats-sweep", "--signed",
             "--sigma-min", "0.1", "--sigma-max", "40", "--points", "25"]
        )
        assert rc == 0
        rows = (tmp_path / "sweep_argmin.csv").read_text().splitlines()[1:]
        assert all(float(r.split(",")[2]) < 0.01 for r in rows)

    def test_thresholds_csv(self, tmp_path):
        rc = main(
            ["--seed", "1", "--out", str(tmp_path), "stats-thresholds",
             "--unsigned", "--points", "80", "--samples", "2000"]
        )
        assert rc == 0
        lines = (tmp_path / "thresholds.csv").read_text().splitlines()
        assert lines[0] == "fl,sigma_threshold" and len(lines) > 3

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["--seed", "5", "--out", str(out), "stats-sweep", "--unsigned",
                  "--points", "8", "--samples", "1000"])
        assert (a / "sweep_grid.csv").read_bytes() == (b / "sweep_grid.csv").read_bytes()


class TestTrainCommands:
    def test_train_emits_model_program_log(self, tmp_path):
        rc = main(["--seed", "3", "--out", str(tmp_path), "train", "--steps", "12",
                   "--arch", "mlp"])
        assert rc == 0
        for name in ("model.fxq", "program.fxq", "train_log.csv", "sample_input.fxt"):
            assert (tmp_path / name).exists(), name
        log = (tmp_path / "train_log.csv").read_text()
        assert log.splitlines()[0] == "step,loss,acc,alpha_mean,fl_changes"
        assert len(log.splitlines()) == 13

    def test_train_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            main(["--seed", "4", "--out", str(out), "train", "--steps", "10",
                  "--arch", "cnn"])
        for name in ("model.fxq", "program.fxq", "train_log.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_finetune_pipeline(self, tmp_path):
        assert main(["--seed", "6", "--out", str(tmp_path), "train", "--float",
                     "--steps", "60", "--arch", "mlp"]) == 0
        rc = main(["--seed", "6", "--out", str(tmp_path / "ft"), "finetune",
                   "--model", str(tmp_path / "model.fxq"), "--arch", "mlp",
                   "--steps", "10", "--fl-space", "0..8"])
        assert rc == 0
        assert (tmp_path / "ft" / "program.fxq").exists()

    def test_quantize_and_grid_search(self, tmp_path):
        assert main(["--seed", "7", "--out", str(tmp_path), "train", "--float",
                     "--steps", "40", "--arch", "mlp"]) == 0
        model = str(tmp_path / "model.fxq")
        assert main(["--seed", "7", "--out", str(tmp_path / "q"), "quantize",
                     "--model", model]) == 0
        assert main(["--seed", "7", "--out", str(tmp_path / "gs"), "grid-search",
                     "--model", model, "--fl-space", "4,6,8"]) == 0
        assert (tmp_path / "q" / "program.fxq").exists()
        assert (tmp_path / "gs" / "program.fxq").exists()


class TestInferCommand:
    def test_infer_deterministic_outputs(self, tmp_path):
        main(["--seed", "8", "--out", str(tmp_path), "train", "--steps", "10",
              "--arch", "cnn"])
        args = ["--out", str(tmp_path), "infer", "--program",
                str(tmp_path / "program.fxq"), "--input",
                str(tmp_path / "sample_input.fxt"), "--dump-trace", "trace.json"]
        assert main(args + ["--output", "l1.fxt"]) == 0
        assert main(args + ["--output", "l2.fxt"]) == 0
        assert (tmp_path / "l1.fxt").read_bytes() == (tmp_path / "l2.fxt").read_bytes()
        assert (tmp_path / "trace.json").exists()


class TestVerifyCommand:
    def test_verify_passes_on_clean_path(self, tmp_path, capsys):
        rc = main(["--seed", "9", "--out", str(tmp_path), "verify", "--chains", "4"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.count("PASS") == 3 and "FAIL" not in out

    def test_verify_fails_on_corrupt_program(self, tmp_path, capsys):
        main(["--seed", "10", "--out", str(tmp_path), "train", "--steps", "8",
              "--arch", "cnn"])
        from fxpquant import engine

        program = engine.load_program(str(tmp_path / "program.fxq"))
        w = program.weights["conv3"].astype(np.int64)
        program.weights["conv3"] = np.clip(w + 11, -127, 127).astype(np.int8)
        engine.save_program(str(tmp_path / "program.fxq"), program)
        rc = main(["--seed", "10", "verify", "--chains", "2",
                   "--model", str(tmp_path / "model.fxq"),
                   "--program", str(tmp_path / "program.fxq")])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out


class TestUsageErrors:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["stats-sweep"])  # --signed/--unsigned required
        assert exc.value.code == 2
