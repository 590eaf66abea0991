import hashlib

import numpy as np
import pytest
import yaml
from PIL import Image

from piuq.cli import run


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["make-data", "--out", str(root / "data"), "--count", "16", "--d", "32", "--eval-count", "6"]) == 0
    cfg = {"generator_updates_total": 2, "batch_size": 4, "generator_width": 2, "critic_width": 2,
           "critic_steps_per_cycle": 2, "dataset": "data/manifest.yaml"}
    (root / "run.yaml").write_text(yaml.safe_dump(cfg))
    code = run(["train", "--config", str(root / "run.yaml"), "--mode", "UAPI", "--lambda", "10",
                "--out", str(root / "run")])
    assert code == 0
    return root


def test_make_data_outputs(workspace):
    d = workspace / "data"
    for name in ("manifest.yaml", "inputs.bin", "targets.bin", "eval_inputs.bin", "eval_targets.bin",
                 "effective_config.yaml", "VERSION"):
        assert (d / name).exists()


def test_train_run_directory(workspace):
    r = workspace / "run"
    assert (r / "train_log.jsonl").exists() and (r / "checkpoint-final.pt").exists()
    eff = yaml.safe_load((r / "effective_config.yaml").read_text())
    assert eff["mode"] == "UAPI" and eff["patch_weight"] == 10.0
    assert (r / "VERSION").read_text().startswith("piuq")


def test_cli_overrides_config(workspace, tmp_path):
    code = run(["train", "--config", str(workspace / "run.yaml"), "--steps", "1", "--seed", "5",
                "--mode", "PI", "--out", str(tmp_path)])
    assert code == 0
    eff = yaml.safe_load((tmp_path / "effective_config.yaml").read_text())
    assert (eff["generator_updates_total"], eff["seed"], eff["mode"]) == (1, 5, "PI")


def test_evaluate(workspace, tmp_path):
    code = run(["evaluate", "--checkpoint", str(workspace / "run" / "checkpoint-final.pt"),
                "--scenarios", "GN0,IP2", "--out", str(tmp_path)])
    assert code == 0
    rows = (tmp_path / "eval_report.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["GN0", "IP2"]
    assert (tmp_path / "eval_report.txt").exists()


def test_evaluate_rerun_is_identical(workspace, tmp_path):
    ckpt = str(workspace / "run" / "checkpoint-final.pt")
    digests = []
    for sub in ("a", "b"):
        assert run(["evaluate", "--checkpoint", ckpt, "--scenarios", "GN5,IP5", "--out", str(tmp_path / sub)]) == 0
        digests.append([hashlib.sha256((tmp_path / sub / f).read_bytes()).hexdigest()
                        for f in ("eval_report.txt", "eval_report.csv", "uncertainty_scatter.csv")])
    assert digests[0] == digests[1]


def test_train_rerun_reproduces_checkpoint_weights(workspace, tmp_path):
    import torch

    args = ["train", "--config", str(workspace / "run.yaml"), "--mode", "UAPI", "--lambda", "10", "--out"]
    assert run(args + [str(tmp_path)]) == 0
    a = torch.load(workspace / "run" / "checkpoint-final.pt", weights_only=True)["generator"]
    b = torch.load(tmp_path / "checkpoint-final.pt", weights_only=True)["generator"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_uq_report(workspace, tmp_path):
    code = run(["uq-report", "--checkpoint", str(workspace / "run" / "checkpoint-final.pt"), "--out", str(tmp_path)])
    assert code == 0
    assert "pcc" in (tmp_path / "uq_report.txt").read_text()
    assert len((tmp_path / "uncertainty_scatter.csv").read_text().splitlines()) == 7


def test_predict(workspace, tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for k in range(2):
        Image.fromarray(np.full((32, 32), 40 * k, dtype=np.uint8)).save(src / f"s{k}.png")
    code = run(["predict", "--checkpoint", str(workspace / "run" / "checkpoint-final.pt"), "--input", str(src),
                "--out", str(tmp_path / "out")])
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "out" / "images").iterdir()) == ["s0.png", "s1.png"]
    assert (tmp_path / "out" / "scale_maps.bin").exists()
    assert len(list((tmp_path / "out" / "scale_maps").iterdir())) == 2


def test_evaluate_without_ground_truth_fails(workspace, tmp_path):
    m = tmp_path / "m.yaml"
    m.write_text(yaml.safe_dump({"dataset": {"format": "tensor", "inputs": str(workspace / "data" / "inputs.bin"),
                                             "targets": str(workspace / "data" / "targets.bin")}}))
    ckpt = str(workspace / "run" / "checkpoint-final.pt")
    assert run(["evaluate", "--checkpoint", ckpt, "--dataset", str(m), "--out", str(tmp_path / "e")]) == 2
    assert run(["uq-report", "--checkpoint", ckpt, "--dataset", str(m), "--out", str(tmp_path / "u")]) == 2


def test_grid_lambda(workspace, tmp_path):
    code = run(["grid-lambda", "--config", str(workspace / "run.yaml"), "--grid", "1,10,1", "--fraction", "0.5",
                "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "grid.csv").read_text().splitlines()[0] == "lambda,ssim,psnr"
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 3
    assert (tmp_path / "recommendation.txt").read_text().startswith("lambda=")


def test_usage_errors(capsys, tmp_path):
    assert run(["train", "--bogus"]) == 1
    assert "--config" in capsys.readouterr().err
    assert run(["frobnicate"]) == 1
    assert run([]) == 1
    assert run(["evaluate", "--checkpoint", "x", "--scenarios", "ZZ9", "--out", str(tmp_path)]) == 1


def test_runtime_errors(tmp_path):
    assert run(["evaluate", "--checkpoint", str(tmp_path / "missing.pt"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.pt").write_bytes(b"junk")
    assert run(["predict", "--checkpoint", str(tmp_path / "bad.pt"), "--input", str(tmp_path),
                "--out", str(tmp_path / "p")]) == 2


def test_output_root_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("PIUQ_OUTPUT_ROOT", str(tmp_path))
    assert run(["make-data", "--count", "16", "--d", "32", "--eval-count", "0"]) == 0
    assert (tmp_path / "make-data" / "manifest.yaml").exists()


def test_help_exit_zero(capsys):
    assert run(["--help"]) == 0
