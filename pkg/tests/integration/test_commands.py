"""Integration tests driving the console commands end to end through launcher.run."""

import logging
import os
import sys

# Add parent directory to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../..")))

import orjson
import pytest

import launcher
from helpers.constants import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE


def tree_bytes(root):
    return {str(path.relative_to(root)): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


@pytest.fixture
def dataset(tmp_path, tiny_config_file, mock_env):
    out = tmp_path / "data"
    assert launcher.run(["gen", "--config", str(tiny_config_file), "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture
def test_set(tmp_path, tiny_config_file, mock_env):
    out = tmp_path / "test"
    args = ["gen", "--config", str(tiny_config_file), "--out", str(out), "--count", "3", "--seed", "99"]
    assert launcher.run(args) == EXIT_OK
    return out


@pytest.fixture
def oracle_dir(tmp_path, tiny_config_file, dataset):
    out = tmp_path / "pretrain"
    assert launcher.run(["pretrain", "--config", str(tiny_config_file), "--data", str(dataset), "--out", str(out)]) == 0
    return out / "checkpoint"


@pytest.mark.integration
@pytest.mark.usefixtures("mock_env")
class TestGenCommand:
    def test_writes_dataset(self, tmp_path, tiny_config_file, capsys):
        out = tmp_path / "scenes"
        code = launcher.run(["gen", "--config", str(tiny_config_file), "--out", str(out), "--count", "3"])
        assert code == EXIT_OK
        assert capsys.readouterr().out.startswith(f"wrote 3 scene(s) to {out}")
        assert (out / "images" / "0002.pgm").is_file()
        assert (out / "images" / "0002.lines.txt").is_file()
        assert (out / "index.txt").read_text().count("\n") == 3
        assert (out / "config.resolved").is_file()

    def test_rerun_is_byte_identical(self, tmp_path, tiny_config_file):
        for name in ("a", "b"):
            assert launcher.run(["gen", "--config", str(tiny_config_file), "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_zero_count_writes_empty_index(self, tmp_path, tiny_config_file):
        out = tmp_path / "empty"
        assert launcher.run(["gen", "--config", str(tiny_config_file), "--out", str(out), "--count", "0"]) == 0
        assert (out / "index.txt").read_text().strip() == ""

    def test_negative_count(self, tmp_path):
        assert launcher.run(["gen", "--out", str(tmp_path / "x"), "--count", "-1"]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("[data]\nroad_type = highway\n")
        assert launcher.run(["gen", "--config", str(config), "--out", str(tmp_path / "x")]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert launcher.run(["gen", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path / "x")]) == 1

    def test_logs_go_to_category_files(self, tmp_path, tiny_config_file):
        launcher.run(["gen", "--config", str(tiny_config_file), "--out", str(tmp_path / "x"), "--count", "1"])
        for handler in logging.getLogger("data").handlers:
            handler.flush()
        assert "gen_done" in (tmp_path / "logs" / "data.log").read_text()


@pytest.mark.integration
@pytest.mark.usefixtures("mock_env")
class TestEvaluateCommand:
    def test_identical_sets_score_one(self, dataset, capsys):
        capsys.readouterr()
        code = launcher.run(["eval", "--format", "synth", "--pred", str(dataset), "--gt", str(dataset)])
        assert code == EXIT_OK
        assert capsys.readouterr().out.strip() == "F1 1.000000"

    def test_empty_predictions_score_zero(self, tmp_path, dataset, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        capsys.readouterr()
        code = launcher.run(["evaluate", "--format", "synth", "--pred", str(empty), "--gt", str(dataset)])
        assert code == EXIT_OK
        assert capsys.readouterr().out.strip() == "F1 0.000000"

    def test_report_files(self, tmp_path, dataset):
        out = tmp_path / "report"
        args = ["eval", "--format", "synth", "--pred", str(dataset), "--gt", str(dataset), "--out", str(out)]
        assert launcher.run(args) == EXIT_OK
        assert (out / "report.csv").read_text().splitlines()[1].startswith("all,8,")
        assert "format: synth" in (out / "report.txt").read_text()

    def test_missing_ground_truth(self, tmp_path, dataset):
        args = ["eval", "--pred", str(dataset), "--gt", str(tmp_path / "nowhere")]
        assert launcher.run(args) == EXIT_DATA

    def test_malformed_prediction(self, tmp_path, dataset, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        (pred / "0000.lines.txt").write_text("1 2 3\n")
        code = launcher.run(["eval", "--format", "synth", "--pred", str(pred), "--gt", str(dataset)])
        assert code == EXIT_DATA
        assert "0000.lines.txt:1" in capsys.readouterr().err

    def test_culane_needs_no_images(self, tmp_path, capsys):
        gt = tmp_path / "gt" / "driver_1"
        gt.mkdir(parents=True)
        (gt / "00030.lines.txt").write_text("500 580 560 400 620 250\n1100 580 1040 400 980 250\n")
        capsys.readouterr()
        args = ["eval", "--pred", str(tmp_path / "gt"), "--gt", str(tmp_path / "gt"), "--out", str(tmp_path / "r")]
        assert launcher.run(args) == EXIT_OK
        assert capsys.readouterr().out.strip() == "F1 1.000000"
        table = (tmp_path / "r" / "report.txt").read_text()
        assert "iou_threshold: 0.5\n" in table
        assert "lane_width: 30\n" in table

    def test_tusimple(self, tmp_path, capsys):
        record = {
            "lanes": [[-2, 100, 110, 120], [300, 310, -2, -2]],
            "h_samples": [160, 170, 180, 190],
            "raw_file": "clips/0530/1492626047222176976_0/20.jpg",
        }
        gt = tmp_path / "gt.json"
        gt.write_bytes(orjson.dumps(record) + b"\n")
        capsys.readouterr()
        assert launcher.run(["eval", "--format", "tusimple", "--pred", str(gt), "--gt", str(gt)]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "accuracy 1.000000"

    def test_tusimple_malformed(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json\n")
        assert launcher.run(["eval", "--format", "tusimple", "--pred", str(bad), "--gt", str(bad)]) == EXIT_DATA


@pytest.mark.integration
@pytest.mark.usefixtures("mock_env")
class TestGradcheckCommand:
    def test_passing_case(self, capsys):
        assert launcher.run(["gradcheck", "--case", "relu"]) == EXIT_OK
        assert capsys.readouterr().out.strip().splitlines()[-1] == "1/1 groups within 0.0001"

    def test_zero_tolerance_fails(self, capsys):
        assert launcher.run(["gradcheck", "--case", "sigmoid", "--tolerance", "0"]) == EXIT_CHECK
        assert "sigmoid/x" in capsys.readouterr().err

    def test_unknown_case(self):
        assert launcher.run(["gradcheck", "--case", "no_such_case"]) == EXIT_USAGE


@pytest.mark.integration
@pytest.mark.usefixtures("mock_env")
class TestTrainCommands:
    def test_baseline_run(self, tmp_path, tiny_config_file, dataset, test_set, capsys):
        out = tmp_path / "run"
        args = ["train", "--config", str(tiny_config_file), "--data", str(dataset), "--test", str(test_set)]
        capsys.readouterr()
        assert launcher.run([*args, "--out", str(out)]) == EXIT_OK
        assert capsys.readouterr().out.startswith("F1 ")

        loss_lines = (out / "loss.csv").read_text().splitlines()
        assert loss_lines[0] == "step,lr,l_ld,reg_stage1,reg_stage2,total"
        assert len(loss_lines) == 7
        summary = (out / "summary.txt").read_text()
        assert "regularized: no" in summary
        assert "lambda: 0.1\n" in summary
        assert "norm_mode: per_channel_spatial\n" in summary
        assert "variant: samiro\n" in summary
        assert "wall_clock_seconds" not in summary
        assert (out / "checkpoint" / "manifest.txt").is_file()
        assert sorted(p.name for p in (out / "predictions").iterdir()) == [f"{i:04d}.lines.txt" for i in range(3)]
        assert (out / "report.csv").is_file()
        assert (out / "config.resolved").is_file()

    def test_rerun_has_identical_loss_curve(self, tmp_path, tiny_config_file, dataset):
        for name in ("a", "b"):
            args = ["train", "--config", str(tiny_config_file), "--data", str(dataset), "--out", str(tmp_path / name)]
            assert launcher.run(args) == EXIT_OK
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
        assert (tmp_path / "a" / "summary.txt").read_bytes() == (tmp_path / "b" / "summary.txt").read_bytes()

    def test_regularized_run(self, tmp_path, tiny_config_file, dataset, oracle_dir, capsys):
        assert (oracle_dir.parent / "loss.csv").read_text().startswith("step,lr,mim_loss\n")
        out = tmp_path / "run"
        args = ["train", "--config", str(tiny_config_file), "--data", str(dataset), "--oracle", str(oracle_dir)]
        assert launcher.run([*args, "--out", str(out)]) == EXIT_OK
        assert "regularized: yes" in (out / "summary.txt").read_text()
        rows = (out / "loss.csv").read_text().splitlines()[1:]
        assert any(float(row.split(",")[3]) != 0.0 for row in rows)

    def test_oracle_channel_mismatch(self, tmp_path, tiny_config_text, dataset, oracle_dir, capsys):
        config = tmp_path / "rgb.cfg"
        config.write_text(tiny_config_text.replace("[data]\n", "[data]\nchannels = 3\n"))
        args = ["train", "--config", str(config), "--data", str(dataset), "--oracle", str(oracle_dir)]
        assert launcher.run([*args, "--out", str(tmp_path / "run")]) == EXIT_DATA
        assert "channel" in capsys.readouterr().err

    def test_lane_model_is_not_an_oracle(self, tmp_path, tiny_config_file, dataset):
        first = tmp_path / "first"
        args = ["train", "--config", str(tiny_config_file), "--data", str(dataset)]
        assert launcher.run([*args, "--out", str(first)]) == EXIT_OK
        code = launcher.run([*args, "--oracle", str(first / "checkpoint"), "--out", str(tmp_path / "second")])
        assert code == EXIT_DATA

    def test_wrong_image_size(self, tmp_path, dataset):
        # default config expects 64x128 frames
        assert launcher.run(["train", "--data", str(dataset), "--out", str(tmp_path / "run")]) == EXIT_DATA

    def test_missing_dataset(self, tmp_path, tiny_config_file):
        args = ["pretrain", "--config", str(tiny_config_file), "--data", str(tmp_path / "none")]
        assert launcher.run([*args, "--out", str(tmp_path / "run")]) == EXIT_DATA
