"""End-to-end command line checks via subprocesses."""

import json
import subprocess
import sys

import numpy as np
import pytest

TINY_CONFIG = {
    "epochs_per_stage": 2,
    "finetune_epochs": 1,
    "batch_size": 4,
    "lr_initial": 0.005,
    "lr_drop_to": 0.001,
    "lr_drop_epoch": 100,
    "seed": 0,
    "cd_samples": 128,
    "encode_points": 96,
    "template_level": 1,
    "feature_dim": 16,
    "deform_hidden": [32, 16],
    "encoder_hidden": [16, 24],
    "taus": [0.4, 0.3],
    "samples_per_face": 2,
}


def run_cli(*args, check=True):
    proc = subprocess.run(
        [sys.executable, "-m", "topomesh.cli", *[str(a) for a in args]],
        capture_output=True, text=True,
    )
    if check and proc.returncode != 0:
        raise AssertionError(
            f"cli {' '.join(map(str, args))} failed ({proc.returncode}):\n{proc.stderr}"
        )
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run_cli("gen-data", "--out", root / "data", "--count", 8, "--seed", 3)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    run_cli("train", "--data", root / "data", "--config", cfg,
            "--out", root / "model.ckpt", "--threads", 1)
    return root


def test_gen_data_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["count"] == 8
    assert len(manifest["entries"]) == 8
    for entry in manifest["entries"]:
        assert (workspace / "data" / entry["mesh"]).exists()


def test_gen_data_is_deterministic(workspace, tmp_path):
    run_cli("gen-data", "--out", tmp_path / "again", "--count", 8, "--seed", 3)
    original = (workspace / "data" / "shape_0000.gt.bin").read_bytes()
    again = (tmp_path / "again" / "shape_0000.gt.bin").read_bytes()
    assert original == again


def test_train_is_deterministic(workspace, tmp_path):
    out = tmp_path / "model2.ckpt"
    run_cli("train", "--data", workspace / "data", "--config", workspace / "cfg.json",
            "--out", out, "--threads", 1)
    assert out.read_bytes() == (workspace / "model.ckpt").read_bytes()


def test_train_curves_outputs(workspace, tmp_path):
    curves = tmp_path / "curves.csv"
    run_cli("train", "--data", workspace / "data", "--config", workspace / "cfg.json",
            "--out", tmp_path / "m.ckpt", "--curves", curves, "--threads", 1)
    header = curves.read_text().splitlines()[0]
    assert header == "epoch,stage,cd,error,boundary,normal,smooth,edge,total"
    assert (tmp_path / "curves.png").exists()


def test_reconstruct_outputs(workspace, tmp_path):
    from topomesh.mesh import load_obj

    out = tmp_path / "mesh.obj"
    run_cli("reconstruct", "--model", workspace / "model.ckpt",
            "--input", workspace / "data" / "shape_0000.enc.bin",
            "--out", out, "--dump-stages", "--cloud-out", tmp_path / "mesh.ply")
    mesh = load_obj(out)
    assert mesh.num_faces > 0
    for k in range(1, 6):
        assert (tmp_path / f"mesh.stage{k}.obj").exists()
    ply = (tmp_path / "mesh.ply").read_text().splitlines()
    assert ply[0] == "ply"
    assert "property double nx" in ply
    assert f"element vertex 10000" in ply[2]


def test_reconstruct_accepts_obj_input(workspace, tmp_path):
    out = tmp_path / "from_obj.obj"
    run_cli("reconstruct", "--model", workspace / "model.ckpt",
            "--input", workspace / "data" / "shape_0001.obj", "--out", out)
    assert out.exists()


def test_reconstruct_rejects_unknown_extension(workspace, tmp_path):
    bad = tmp_path / "points.xyz"
    bad.write_text("0 0 0\n")
    proc = run_cli("reconstruct", "--model", workspace / "model.ckpt",
                   "--input", bad, "--out", tmp_path / "out.obj", check=False)
    assert proc.returncode == 1


def test_eval_outputs(workspace, tmp_path):
    report = tmp_path / "metrics.csv"
    run_cli("eval", "--model", workspace / "model.ckpt", "--data", workspace / "data",
            "--split", "test", "--report", report,
            "--cd-points", 1000, "--emd-points", 32)
    lines = report.read_text().strip().splitlines()
    assert lines[0] == "shape_id,category,cd,emd"
    assert len(lines) > 1
    assert (tmp_path / "metrics.png").exists()


def test_tau_sweep_outputs(workspace, tmp_path):
    report = tmp_path / "sweep.csv"
    # thresholds sized to this barely-trained model so pruning survives
    run_cli("tau-sweep", "--model", workspace / "model.ckpt", "--data", workspace / "data",
            "--split", "train", "--taus", "0.8,1.6", "--report", report,
            "--cd-points", 400)
    lines = report.read_text().strip().splitlines()
    assert lines[0].startswith("tau,gt_to_pred,pred_to_gt")
    assert len(lines) == 3
    assert (tmp_path / "sweep.png").exists()


def test_gradcheck_passes():
    proc = run_cli("gradcheck", "--instances", 2)
    assert proc.stderr.count(" ok") == 10
    assert "FAIL" not in proc.stderr


def test_exit_code_usage_errors():
    assert run_cli("--bogus", check=False).returncode == 2
    assert run_cli("train", "--no-such-flag", check=False).returncode == 2
    assert run_cli("gen-data", "--out", "x", "--count", 0, check=False).returncode == 2


def test_exit_code_runtime_errors(tmp_path):
    proc = run_cli("eval", "--model", tmp_path / "missing.ckpt",
                   "--data", tmp_path, "--split", "test",
                   "--report", tmp_path / "r.csv", check=False)
    assert proc.returncode == 1
    assert proc.stderr.strip() != ""


def test_logs_go_to_stderr_not_stdout(workspace, tmp_path):
    proc = run_cli("reconstruct", "--model", workspace / "model.ckpt",
                   "--input", workspace / "data" / "shape_0000.enc.bin",
                   "--out", tmp_path / "m.obj")
    assert proc.stdout == ""
    assert "wrote" in proc.stderr
