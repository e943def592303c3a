import json
import subprocess
import sys

import pytest


def gwai(*args, cwd=None):
    proc = subprocess.run([sys.executable, "-m", "gwainet", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)
    return proc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    out = gwai("gen-data", "--out", data, "--identities", "8",
               "--per-identity", "2", "--hr-size", "32", "--seed", "3")
    assert out.returncode == 0, out.stderr
    cfg = {
        "arch": {"preset": "nano"},
        "seed": 11,
        "stages": {
            "inet-pretrain": {"steps": 2, "batch_size": 2},
            "wnet-pretrain": {"steps": 2, "batch_size": 2},
            "content": {"steps": 3, "batch_size": 2},
            "adversarial": {"steps": 1, "batch_size": 2},
        },
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def test_gen_data_reports_splits(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["splits"]["train"]


def test_train_all_stages_and_eval(workspace):
    for stage in ("inet-pretrain", "wnet-pretrain", "content", "adversarial"):
        proc = gwai("train", "--config", workspace / "cfg.json",
                    "--data", workspace / "data",
                    "--out", workspace / "run", "--stage", stage)
        assert proc.returncode == 0, proc.stderr
    assert (workspace / "run" / "model_latest.gwai").exists()
    assert (workspace / "run" / "train_adversarial.jsonl").exists()

    proc = gwai("eval", "--model", workspace / "run" / "model_latest.gwai",
                "--data", workspace / "data", "--split", "test",
                "--mode", "shuffled-guide", "--seed", "1")
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    assert report["mode"] == "shuffled-guide"
    assert report["entries"]


def test_infer_writes_deterministic_png(workspace, tmp_path):
    import numpy as np
    from gwainet.functional import bicubic_resize
    from gwainet.synthdata import _read_png, _write_png

    gt = _read_png(workspace / "data" / "identity_000" / "img_00.png")
    lr_path = tmp_path / "lr.png"
    _write_png(lr_path, np.clip(bicubic_resize(gt, 4, 4), 0.0, 1.0))
    guide = workspace / "data" / "identity_000" / "img_01.png"
    out1 = tmp_path / "sr1.png"
    out2 = tmp_path / "sr2.png"
    for out in (out1, out2):
        proc = gwai("infer", "--model", workspace / "run" / "model_latest.gwai",
                    "--lr", lr_path, "--guide", guide, "--out", out)
        assert proc.returncode == 0, proc.stderr
    assert out1.read_bytes() == out2.read_bytes()
    from PIL import Image
    assert Image.open(out1).size == (32, 32)  # 8x the 4px LR input


def test_gradcheck_single_op(workspace):
    proc = gwai("gradcheck", "--op", "concat_depth", "--tol", "1e-4")
    assert proc.returncode == 0, proc.stderr
    assert "PASS concat_depth" in proc.stdout


def test_validation_errors_exit_1(workspace, tmp_path):
    assert gwai("train", "--config", tmp_path / "nope.json",
                "--data", workspace / "data", "--out", tmp_path,
                "--stage", "content").returncode == 1
    assert gwai("gradcheck", "--op", "bogus").returncode == 1
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text("{not json")
    assert gwai("train", "--config", bad_cfg, "--data", workspace / "data",
                "--out", tmp_path, "--stage", "content").returncode == 1
    assert gwai("eval", "--model", workspace / "run" / "model_latest.gwai",
                "--data", workspace / "data", "--split", "test",
                "--mode", "sideways").returncode == 1


def test_gen_data_translation_nuisance_mode(tmp_path):
    proc = gwai("gen-data", "--out", tmp_path / "d", "--identities", "2",
                "--per-identity", "2", "--hr-size", "32", "--seed", "5",
                "--nuisance", "translation")
    assert proc.returncode == 0, proc.stderr
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["nuisance_mode"] == "translation"


def test_missing_guide_for_guided_model_exit_1(workspace, tmp_path):
    import numpy as np
    from gwainet.synthdata import _write_png
    lr_path = tmp_path / "lr.png"
    _write_png(lr_path, np.zeros((3, 4, 4), np.float32))
    proc = gwai("infer", "--model", workspace / "run" / "model_latest.gwai",
                "--lr", lr_path, "--out", tmp_path / "out.png")
    assert proc.returncode == 1
    assert "guid" in proc.stderr.lower()
