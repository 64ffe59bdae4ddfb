import json

import pytest

from dcgct import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK
from main import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data plus a two-epoch tiny model trained through the CLI"""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "train.jsonl")
    assert main(["synth", "--count", "24", "--seed", "3", "--out", data]) == EXIT_OK
    config = root / "run.json"
    config.write_text(json.dumps({"model": {"preset": "tiny"}, "train": {"epochs": 2, "batch_size": 8}}))
    out = root / "run"
    code = main(["train", "--config", str(config), "--data", data, "--out", str(out), "--seed", "1", "--quiet"])
    assert code == EXIT_OK
    return {"root": root, "data": data, "config": str(config), "out": out, "ckpt": str(out / "best.ckpt")}


def test_train_outputs(workspace):
    out = workspace["out"]
    assert (out / "best.ckpt").exists()
    assert len((out / "log.jsonl").read_text().splitlines()) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["status"] == "ok"
    assert manifest["config"]["model"]["channels"] == 16
    assert manifest["config"]["train"]["seed"] == 1


def test_train_requires_data(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "--data" in capsys.readouterr().err


def test_unknown_flag_is_an_error(workspace):
    assert main(["eval", "--data", workspace["data"], "--bogus"]) == EXIT_CONFIG


def test_same_seed_reproduces_validation(workspace):
    again = workspace["root"] / "again"
    code = main(["train", "--config", workspace["config"], "--data", workspace["data"], "--out", str(again),
                 "--seed", "1", "--quiet"])
    assert code == EXIT_OK
    first = (workspace["out"] / "log.jsonl").read_text().splitlines()[-1]
    second = (again / "log.jsonl").read_text().splitlines()[-1]
    assert json.loads(first)["val_mpjpe_mm"] == json.loads(second)["val_mpjpe_mm"]


def test_identity_debug_eval(workspace, tmp_path):
    report = tmp_path / "report.json"
    assert main(["eval", "--data", workspace["data"], "--identity-debug", "--report", str(report)]) == EXIT_OK
    result = json.loads(report.read_text())
    assert result["mpjpe_mm"] == 0.0
    assert result["pck_percent"] == 100.0


def test_protocol_two_report(workspace, tmp_path):
    report = tmp_path / "report.json"
    code = main(["eval", "--ckpt", workspace["ckpt"], "--data", workspace["data"], "--protocol", "2",
                 "--report", str(report)])
    assert code == EXIT_OK
    result = json.loads(report.read_text())
    assert {"mpjpe_mm", "p_mpjpe_mm", "pck_percent", "auc_percent", "sample_count", "per_action"} <= set(result)


def test_predict_then_eval_predictions(workspace, tmp_path):
    preds = tmp_path / "preds.jsonl"
    assert main(["predict", "--ckpt", workspace["ckpt"], "--data", workspace["data"], "--out", str(preds)]) == EXIT_OK
    lines = preds.read_text().splitlines()
    assert len(lines) == 24
    assert "pred3d_mm" in json.loads(lines[0]) and "target3d_mm" not in json.loads(lines[0])

    from_file, from_ckpt = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", "--pred-file", str(preds), "--data", workspace["data"], "--report", str(from_file)]) == 0
    assert main(["eval", "--ckpt", workspace["ckpt"], "--data", workspace["data"], "--report", str(from_ckpt)]) == 0
    assert json.loads(from_file.read_text())["mpjpe_mm"] == pytest.approx(
        json.loads(from_ckpt.read_text())["mpjpe_mm"], rel=1e-5)


def test_arity_mismatch(workspace, tmp_path):
    seq = str(tmp_path / "seq.jsonl")
    assert main(["synth", "--count", "3", "--frames", "3", "--out", seq]) == EXIT_OK
    assert main(["predict", "--ckpt", workspace["ckpt"], "--data", seq, "--out", str(tmp_path / "p.jsonl")]) == EXIT_CONFIG


def test_checkpoint_topology_mismatch(workspace, tmp_path):
    topo = tmp_path / "three.json"
    topo.write_text(json.dumps({"names": ["Pelvis", "Spine", "Head"], "parents": [-1, 0, 1], "root": 0}))
    data = str(tmp_path / "three.jsonl")
    assert main(["synth", "--count", "2", "--topology", str(topo), "--out", data]) == EXIT_OK
    code = main(["eval", "--ckpt", workspace["ckpt"], "--data", data, "--topology", str(topo)])
    assert code == EXIT_CONFIG


def test_missing_checkpoint(workspace):
    assert main(["eval", "--ckpt", "/nonexistent.ckpt", "--data", workspace["data"]]) == EXIT_CONFIG


def test_report_params(capsys):
    assert main(["report", "--what", "params"]) == EXIT_OK
    out = capsys.readouterr().out
    paper = [line for line in out.splitlines() if line.split()[1:2] == ["paper"]]
    assert paper and "2.07M" in paper[0] and "pass" in paper[0]


def test_report_flops(capsys):
    assert main(["report", "--what", "flops"]) == EXIT_OK
    out = capsys.readouterr().out
    assert any("frames9" in line and "77.00M" in line for line in out.splitlines())


def test_report_unknown_what():
    assert main(["report", "--what", "latency"]) == EXIT_CONFIG


def test_verify_invariants():
    assert main(["verify", "--suite", "invariants"]) == EXIT_OK


def test_verify_grads_negative_control():
    assert main(["verify", "--suite", "grads", "--corrupt-adjoint", "gelu"]) == EXIT_FAILURE


@pytest.mark.slow
def test_verify_grads_pass():
    assert main(["verify", "--suite", "grads"]) == EXIT_OK
