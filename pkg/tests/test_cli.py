import subprocess
import sys

import pytest

from memreg import data as D
from memreg.cli import main
from memreg.models import load_checkpoint

TINY = """\
stage1_iters = 4
stage2_iters = 2
eval_every = 2
val_count = 1
eval_count = 2
crop = 32
source_size = 4
target_size = 4
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def test_gen_data(tmp_path, cfg, capsys):
    out = tmp_path / "d.bin"
    assert main(["gen-data", "--config", cfg, "--domain", "target", "--count", "3", "--out", str(out)]) == 0
    spec, samples = D.import_dataset(out)
    assert spec.domain == "target" and len(samples) == 3
    assert "wrote 3 target samples" in capsys.readouterr().out


def test_gen_data_zero_count(tmp_path):
    out = tmp_path / "e.bin"
    assert main(["gen-data", "--count", "0", "--out", str(out)]) == 0
    assert D.import_dataset(out)[1] == []


def test_full_chain(tmp_path, cfg, capsys):
    s1, s2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["train-stage1", "--config", cfg, "--out", str(s1)]) == 0
    assert (s1 / "stage1_metrics.csv").read_text().startswith("iter,lr,")
    ckpt = str(s1 / "stage1.ckpt")
    assert load_checkpoint(ckpt).meta["stage"] == 1

    pseudo = tmp_path / "pl"
    assert main(["pseudo-label", "--config", cfg, "--checkpoint", ckpt, "--out", str(pseudo)]) == 0
    assert (tmp_path / "pl.bin").exists() and (tmp_path / "pl.json").exists()

    assert main(["train-stage2", "--config", cfg, "--checkpoint", ckpt, "--pseudo", str(pseudo),
                 "--out", str(s2)]) == 0
    assert load_checkpoint(s2 / "stage2.ckpt").meta["stage"] == 2

    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--checkpoint", str(s2 / "stage2.ckpt")]) == 0
    out = capsys.readouterr().out
    for name in D.CLASS_NAMES:
        assert name in out
    assert "fused mIoU" in out


def test_ablate_and_report(tmp_path, capsys):
    plan = tmp_path / "plan.cfg"
    plan.write_text(TINY + "seeds = 0\narms = source_only, lambda_0.1\n")
    out = tmp_path / "run"
    assert main(["ablate", "--plan", str(plan), "--out", str(out)]) == 0
    first = (out / "report.txt").read_text()
    assert "source_only" in first and "lambda_0.1" in first
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.txt").read_text() == first


def test_bad_config_value_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 0\nlambda_mr = banana\n")
    assert main(["train-stage1", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "lambda_mr" in err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["gen-data", "--out", str(tmp_path / "x")]) == 2  # --count missing
    assert main(["gen-data", "--count", "-1", "--out", str(tmp_path / "x")]) == 2
    assert main(["train-stage1", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2


def test_corrupt_checkpoint_exit_1(tmp_path, cfg, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MEMREGCK" + (1).to_bytes(4, "little") + bytes(10))
    assert main(["eval", "--config", cfg, "--checkpoint", str(bad)]) == 1
    assert "FormatError" in capsys.readouterr().err


def test_report_on_empty_dir_fails(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_bad_thread_setting(tmp_path, monkeypatch):
    monkeypatch.setenv("MEMREG_THREADS", "zero")
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "x.bin")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "memreg", "gen-data", "--count", "1",
                           "--out", str(tmp_path / "d.bin")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "memreg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-stage1" in proc.stdout
