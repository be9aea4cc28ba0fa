import json

import numpy as np
import pytest

from main import run
from utils.annotations import group_by_image, read_detections, resolve_image, write_detections
from utils.toy_dataset import make_toy_dataset

SMALL = ["--width", "0.25", "--size", "64"]


@pytest.fixture
def toy(tmp_path):
    csv_path, records = make_toy_dataset(tmp_path / "toy", count=16, image_size=64, seed=0)
    return csv_path, records


def body_lines(out):
    return [line for line in out.splitlines() if line and not line.startswith("#")]


# -------------------------------------------------------------------------------------------
# 参数与退出码
# -------------------------------------------------------------------------------------------
def test_missing_command_is_usage_error(capsys):
    assert run([]) == 1


def test_unknown_flag_is_usage_error(capsys):
    assert run(["analyze", "--bogus"]) == 1
    assert "用法错误" in capsys.readouterr().err


def test_help_exits_cleanly(capsys):
    assert run(["--help"]) == 0
    assert "cluster-anchors" in capsys.readouterr().out


def test_bad_config_file_is_data_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"width_multiplier": 0.25, "bogus": 1}', encoding="utf-8")
    assert run(["analyze", "--config", str(path), "--no-flops"]) == 2
    assert run(["analyze", "--config", str(tmp_path / "none.json"), "--no-flops"]) == 2


def test_unexpected_exception_maps_to_exit_two(monkeypatch, capsys):
    from commands import analyze

    def broken(args, settings):
        raise RuntimeError("boom")

    monkeypatch.setattr(analyze, "run", broken)
    assert run(["analyze", "--no-flops"]) == 2
    assert "内部错误: RuntimeError: boom" in capsys.readouterr().err


def test_invalid_override_is_data_error(capsys):
    assert run(["analyze", "--size", "100", "--no-flops"]) == 2


# -------------------------------------------------------------------------------------------
# analyze
# -------------------------------------------------------------------------------------------
def test_analyze_params_only(capsys):
    assert run(["analyze", *SMALL, "--no-flops", "--depth", "1"]) == 0
    out = capsys.readouterr().out
    assert '"width_multiplier": 0.25' in out
    assert "合计" in out
    assert "backbone" in out and "neck" in out and "head" in out


def test_analyze_writes_json_report(tmp_path, capsys):
    path = tmp_path / "report.json"
    assert run(["analyze", *SMALL, "--output", str(path)]) == 0
    report = json.loads(path.read_text(encoding="utf-8"))
    assert report["input_size"] == 64
    assert report["total_flops"] > 0 and report["total_params"] > 0


def test_analyze_ablation_table(tmp_path, capsys):
    path = tmp_path / "ablation.json"
    assert run(["analyze", *SMALL, "--ablation", "--no-flops", "--output", str(path)]) == 0
    rows = json.loads(path.read_text(encoding="utf-8"))
    names = [row["preset"] for row in rows]
    assert names[0] == "ghostnet" and names[-1] == "lhab"
    params = {row["preset"]: row["total_params"] for row in rows}
    assert params["ghostnet_ptiny"] > params["ghostnet"]
    assert params["lhab"] > params["eca_dual"] > params["eca_shared"]


def test_config_precedence(tmp_path, monkeypatch, capsys):
    env_config = tmp_path / "env.json"
    env_config.write_text('{"width_multiplier": 0.5, "input_size": 64}', encoding="utf-8")
    flag_config = tmp_path / "flag.json"
    flag_config.write_text('{"width_multiplier": 0.25, "input_size": 64}', encoding="utf-8")
    monkeypatch.setenv("HSINET_CONFIG", str(env_config))

    assert run(["analyze", "--no-flops"]) == 0
    assert '"width_multiplier": 0.5' in capsys.readouterr().out
    assert run(["analyze", "--config", str(flag_config), "--no-flops"]) == 0
    assert '"width_multiplier": 0.25' in capsys.readouterr().out
    assert run(["analyze", "--config", str(flag_config), "--order", "2", "--no-flops"]) == 0
    assert '"hsi_order": 2' in capsys.readouterr().out


# -------------------------------------------------------------------------------------------
# cluster-anchors
# -------------------------------------------------------------------------------------------
def test_cluster_anchors_prints_four_groups(toy, tmp_path, capsys):
    csv_path, _ = toy
    out_file = tmp_path / "anchors.txt"
    assert run(["cluster-anchors", "--input", str(csv_path), "--size", "64", "--output", str(out_file)]) == 0
    lines = body_lines(capsys.readouterr().out)
    assert len(lines) == 4
    assert all(len(line.split(", ")) == 3 for line in lines)
    assert out_file.read_text(encoding="utf-8").splitlines() == lines


def test_cluster_anchors_missing_input(tmp_path, capsys):
    assert run(["cluster-anchors", "--input", str(tmp_path / "none.csv")]) == 2


# -------------------------------------------------------------------------------------------
# infer / eval
# -------------------------------------------------------------------------------------------
def test_infer_missing_input_writes_nothing(tmp_path, capsys):
    out = tmp_path / "infer"
    assert run(["infer", *SMALL, "--input", str(tmp_path / "none.png"), "--output", str(out)]) == 2
    assert not out.exists()
    assert not (tmp_path / "runs").exists()


def test_infer_bad_image_in_directory_writes_nothing(toy, tmp_path, capsys):
    csv_path, _ = toy
    images = csv_path.parent / "images"
    (images / "broken.png").write_bytes(b"not an image")
    out = tmp_path / "infer"
    assert run(["infer", *SMALL, "--input", str(images), "--output", str(out)]) == 2
    assert not out.exists()


def test_infer_writes_detection_csv(toy, tmp_path, capsys):
    csv_path, records = toy
    out = tmp_path / "infer"
    image = resolve_image(csv_path, records[0].path)
    assert run(["infer", *SMALL, "--conf", "0.0", "--input", str(image), "--output", str(out), "--save-images"]) == 0
    detections = read_detections(out / "detections.csv")
    for rows in detections.values():
        assert np.all(rows[:, 4] >= rows[:, 2]) and np.all(rows[:, 5] >= rows[:, 3])
        assert np.all(rows[:, 2:] >= 0) and np.all(rows[:, 2:] <= 64)
    assert (out / "images" / f"{image.stem}_det.png").is_file()


def test_eval_with_ground_truth_detections(toy, tmp_path, capsys):
    csv_path, records = toy
    rows = []
    for name, gts in group_by_image(records).items():
        for cls, cx, cy, w, h in gts * [1, 64, 64, 64, 64]:
            rows.append((str(resolve_image(csv_path, name)), int(cls), 0.9, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    det_path = tmp_path / "det.csv"
    write_detections(rows, det_path)
    report_path = tmp_path / "report.json"
    assert run(["eval", *SMALL, "--input", str(csv_path), "--detections", str(det_path), "--output", str(report_path)]) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["map"] == pytest.approx(1.0)
    assert report["recall"] == pytest.approx(1.0)


def test_eval_without_detections_misses_everything(toy, tmp_path, capsys):
    csv_path, _ = toy
    det_path = tmp_path / "empty.csv"
    write_detections([], det_path)
    report_path = tmp_path / "report.json"
    assert run(["eval", *SMALL, "--input", str(csv_path), "--detections", str(det_path), "--output", str(report_path)]) == 0
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["map"] == 0.0 and report["recall"] == 0.0


# -------------------------------------------------------------------------------------------
# train-toy / selftest
# -------------------------------------------------------------------------------------------
def test_train_toy_smoke(tmp_path, capsys):
    out = tmp_path / "train"
    assert run(["train-toy", *SMALL, "--epochs", "1", "--count", "2", "--output", str(out)]) == 0
    assert (out / "data" / "annotations.csv").is_file()
    assert (out / "weights.hsiw").is_file()
    log = (out / "loss.csv").read_text(encoding="utf-8").splitlines()
    assert log[0] == "epoch,lr,total,box,obj,cls"
    assert len(log) == 2

    # 训练输出的配置与权重可以直接用于推理
    image = out / "data" / "images" / "toy_0000.png"
    infer_out = tmp_path / "infer"
    argv = ["infer", "--config", str(out / "config.json"), "--weights", str(out / "weights.hsiw")]
    assert run([*argv, "--input", str(image), "--output", str(infer_out)]) == 0
    assert (infer_out / "detections.csv").is_file()


def test_selftest_passes(capsys):
    assert run(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert out.count("PASS") >= 9
