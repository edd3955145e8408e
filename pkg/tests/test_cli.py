import hashlib
import subprocess
import sys

import pytest

from wbgnn.cli import main

TINY = """\
num_rb = 2
num_users = 4
n_train = 60
n_test = 12
batch_size = 20
sched_widths = 4,6,1
prec_hidden = 8,8
epochs_pre = 1
epochs_sched = 1
epochs_joint = 1
"""

ONES = """\
num_rb = 1
num_users = 1
num_sched = 1
num_rf = 1
num_tx = 1
num_rx = 1
sched_widths = 1,1
prec_hidden = 1
"""


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_flops_all_ones(tmp_path, capsys):
    p = tmp_path / "ones.cfg"
    p.write_text(ONES)
    assert main(["flops", "--config", str(p)]) == 0
    out = capsys.readouterr().out
    assert "scheduler-layer 1 (1->1): 13\n" in out


def test_gen_data_is_reproducible(tmp_path, cfg):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(a)]) == 0
    assert main(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(b), "--threads", "2"]) == 0
    assert _sha(a) == _sha(b)


def test_errors_exit_nonzero_and_clean_up(tmp_path, cfg):
    data = tmp_path / "d.bin"
    main(["gen-data", "--config", str(cfg), "--out", str(data)])
    out = tmp_path / "r.csv"
    assert main(["eval", "--ckpt", str(tmp_path / "nope"), "--data", str(data), "--out", str(out)]) != 0
    assert not out.exists()
    assert main(["gen-data", "--seed", "-1", "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--threads", "0", "--out", str(tmp_path / "x")]) == 2
    ck = tmp_path / "ck"
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY.replace("num_users = 4", "num_users = 5"))
    assert main(["pretrain", "--config", str(bad), "--data", str(data), "--out", str(ck)]) != 0
    assert not ck.exists()


def test_pipeline_end_to_end(tmp_path, cfg):
    data = tmp_path / "train.bin"
    test = tmp_path / "test.bin"
    ck = tmp_path / "ck"
    c = ["--config", str(cfg)]
    assert main(["gen-data", *c, "--out", str(data)]) == 0
    assert main(["gen-data", *c, "--split", "test", "--out", str(test)]) == 0
    assert main(["pretrain", *c, "--data", str(data), "--out", str(ck)]) == 0
    assert main(["train-sched", *c, "--data", str(data), "--ckpt", str(ck), "--out", str(ck)]) == 0
    assert main(["train-joint", *c, "--data", str(data), "--ckpt", str(ck), "--out", str(ck)]) == 0
    for name in ("scheduler.wbnn", "precoder.wbnn", "config.cfg", "pretrain-epochs.csv", "train-joint-epochs.csv"):
        assert (ck / name).is_file()
    report = tmp_path / "eval.csv"
    assert main(["eval", "--ckpt", str(ck), "--data", str(test), "--baselines", "strongest-gnn", "--out", str(report)]) == 0
    assert "ratio_strongest-gnn" in report.read_text()
    sweep = tmp_path / "sweep.csv"
    assert main(["sweep", "--ckpt", str(ck), "--axis", "M", "--values", "1,3", "--samples", "3", "--out", str(sweep)]) == 0
    body = sweep.read_text().splitlines()
    assert len(body) == 4 and body[2].startswith("M=1") and body[3].startswith("M=3")
    spsd = tmp_path / "spsd.csv"
    assert main(["spsd", *c, "--axis", "user-group", "--policy", "gnn", "--ckpt", str(ck), "--samples", "3", "--out", str(spsd)]) == 0
    assert "user-group,3," in spsd.read_text()


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "wbgnn.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
