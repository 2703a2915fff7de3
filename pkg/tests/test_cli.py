import json
import os
import subprocess
import sys

import pytest

import psst.cli as cli
import psst.oracle
from psst.errors import NumericalError
from psst.metrics import read_curve_csv
from psst.world import World

SMALL = ["--hidden", "8", "--embed", "6", "--listener-hidden", "8", "--batch-size", "8", "--max-len", "6"]
QUICK = SMALL + ["--pretrain-speaker-epochs", "1", "--pretrain-listener-epochs", "1", "--joint-epochs", "1"]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("PSST_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path


@pytest.fixture
def world_file(root):
    path = root / "world.json"
    code = cli.main(["world-gen", "--out", str(path), "--values-per-attribute", "3", "--split-sizes", "40,16,16",
                     "--seed", "3"])
    assert code == 0
    return path


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_usage_errors(capsys):
    assert cli.main([]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["train", "--bogus"]) == 1
    assert cli.main(["train", "--lam", "abc"]) == 1
    assert "psst" in capsys.readouterr().err


def test_world_gen(world_file, capsys):
    w = World.load(world_file)
    assert len(w.split("train")) == 40
    assert cli.main(["world-gen", "--out", str(world_file), "--split-sizes", "1,2"]) == 1
    assert cli.main(["world-gen", "--out", str(world_file), "--values-per-attribute", "1"]) == 1


def test_missing_world_is_usage_error(root):
    assert cli.main(["pretrain"]) == 1
    assert cli.main(["pretrain", "--world", str(root / "absent.json")]) == 1


def test_pretrain_then_train_and_evaluate(world_file, root, capsys):
    assert cli.main(["pretrain", "--world", str(world_file), *QUICK, "--output-dir", "pre"]) == 0
    pre = root / "runs" / "pre"
    assert (pre / "speaker_pretrain.ckpt").exists()
    assert "speaker_val_nll" in _json_out(capsys)

    args = ["train", "--world", str(world_file), *QUICK, "--speaker", str(pre / "speaker_pretrain.ckpt"),
            "--listener", str(pre / "listener_pretrain.ckpt"), "--output-dir", "joint"]
    assert cli.main(args) == 0
    out = _json_out(capsys)
    assert out["output_dir"] == str(root / "runs" / "joint")
    manifest = json.loads((root / "runs" / "joint" / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert len(read_curve_csv(root / "runs" / "joint" / "curve.csv")) == 2

    ev = ["evaluate", "--world", str(world_file), *SMALL, "--speaker", manifest["checkpoints"]["speaker"],
          "--listener", manifest["checkpoints"]["listener"], "--split", "val"]
    assert cli.main(ev) == 0
    metrics = _json_out(capsys)
    assert metrics["recall1"] <= metrics["recall5"] <= metrics["recall10"]
    assert cli.main(ev + ["--references"]) == 0
    assert _json_out(capsys)["cider"] >= 0.2


def test_checkpoint_errors(world_file, root):
    base = ["train", "--world", str(world_file), *QUICK]
    assert cli.main(base + ["--speaker", str(root / "x.ckpt")]) == 1
    assert cli.main(base + ["--speaker", str(root / "x.ckpt"), "--listener", str(root / "y.ckpt")]) == 1
    bad = root / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main(base + ["--speaker", str(bad), "--listener", str(bad)]) == 1


def test_config_file_and_flag_precedence(world_file, root, capsys):
    cfg = root / "run.yaml"
    cfg.write_text("lam: 0.5\nmethod: st-mn\nrho: 0.3\njoint-epochs: 1\nseed: 4\n")
    args = ["train", "--world", str(world_file), *QUICK, "--config", str(cfg), "--lam", "0.9",
            "--output-dir", str(root / "abs")]
    assert cli.main(args) == 0
    saved = json.loads((root / "abs" / "manifest.json").read_text())["config"]
    assert saved["lam"] == 0.9
    assert saved["method"] == "st-mn"
    assert saved["rho"] is None
    assert saved["seed"] == 4

    cfg.write_text("lamda: 0.5\n")
    assert cli.main(["train", "--world", str(world_file), "--config", str(cfg)]) == 1
    cfg.write_text("- 1\n- 2\n")
    assert cli.main(["train", "--world", str(world_file), "--config", str(cfg)]) == 1
    assert cli.main(["train", "--world", str(world_file), "--config", str(root / "nope.yaml")]) == 1
    assert cli.main(["train", "--world", str(world_file), "--lam", "2"]) == 1


def test_sweep(world_file, root, capsys):
    args = ["sweep", "--world", str(world_file), *QUICK, "--methods", "psst-mn,st-mn", "--lams", "0.9",
            "--rhos", "0,1", "--seeds", "0", "--cider-level", "0.1", "--output-dir", "grid"]
    assert cli.main(args) == 0
    out = _json_out(capsys)
    assert out["cells"] == 3 and out["failed"] == []
    assert len(out["recall1_at_cider"]) == 3
    assert len(read_curve_csv(root / "runs" / "grid" / "curves.csv")) == 3 * 2
    assert cli.main(["sweep", "--world", str(world_file), "--methods", "sgd"]) == 1


def test_numerical_abort_exit_code(world_file, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("joint training produced nan")

    monkeypatch.setattr(cli, "joint_train", boom)
    assert cli.main(["train", "--world", str(world_file), *QUICK]) == 2


def test_oracle_gate(capsys, monkeypatch):
    assert cli.main(["oracle", "--samples", "20000", "--instances", "2"]) == 0
    text = capsys.readouterr().out
    assert "## gate unbiased=True variance_reduction_ok=True" in text
    assert "baseline=ground-truth" in text
    assert cli.main(["oracle", "--samples", "20000", "--instances", "1", "--json", "--rho-sweep"]) == 0
    out = _json_out(capsys)
    assert out["unbiased"] and set(out["psst_rho_sweep"]) == {"0.0", "0.25", "0.5", "0.75", "1.0"}

    real = psst.oracle.unbiasedness_gate
    monkeypatch.setattr(psst.oracle, "unbiasedness_gate", lambda *a, **k: (False, real(*a, **k)[1]))
    assert cli.main(["oracle", "--samples", "20000", "--instances", "1"]) == 3


def test_oracle_size_error():
    assert cli.main(["oracle", "--vocab", "5", "--length", "3"]) == 1


def test_module_entry_point(tmp_path):
    env = dict(os.environ, PSST_OUTPUT_ROOT=str(tmp_path))
    proc = subprocess.run([sys.executable, "-m", "psst", "--version"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout.startswith("psst ")
    proc = subprocess.run([sys.executable, "-m", "psst", "train", "--world", str(tmp_path / "none.json")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 1
