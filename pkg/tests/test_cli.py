import subprocess
import sys

import pytest

from dfl_backdoor.cli import main, preset_names

TINY = """
[experiment]
seed = 1
name = tiny

[topology]
spec = ring:6

[data]
source = synthetic
n_train = 300
n_test = 100

[sim]
total_rounds = 8
detection_rounds = 4
eval_every = 4

[attack]
strategy = cluster_dba
placement = 0,3
num_clusters = 2
poison_fraction = 0.25
regressor = oracle

[trigger]
blocks = 2
size = 1
gap = 1
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_missing_seed_exit_code(tmp_path, capsys):
    p = tmp_path / "noseed.ini"
    p.write_text(TINY.replace("seed = 1", ""))
    assert main(["validate-config", "--config", str(p)]) == 2
    assert "experiment.seed" in capsys.readouterr().err
    assert main(["validate-config", "--config", str(p), "--seed", "5"]) == 0


def test_bad_arguments(cfg, tmp_path):
    assert main(["validate-config"]) == 2
    assert main(["validate-config", "--config", str(cfg), "--preset", "sanity"]) == 2
    assert main(["validate-config", "--preset", "no_such_preset"]) == 2
    assert main(["validate-config", "--config", str(tmp_path / "absent.ini")]) == 2


def test_all_presets_validate(capsys):
    names = preset_names()
    assert "sanity" in names and "headline" in names
    for name in names:
        assert main(["validate-config", "--preset", name]) == 0, name
    assert capsys.readouterr().out.count("ok ") == len(names)


def test_run_is_byte_identical_and_refuses_overwrite(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(b)]) == 0
    for name in ("metrics.csv", "metadata.json", "config.ini"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "asr.png").exists() and (a / "signal_decay.png").exists()
    # same config into the same directory is fine, a different one is refused
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(a), "--seed", "2"]) == 3


def test_variants_and_sweep(cfg, tmp_path):
    cfg.write_text(TINY + "\n[variant:central]\nattack.strategy = centralized\n"
                   "\n[variant:naive]\nattack.strategy = naive_dba\n")
    out = tmp_path / "v"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0] == "run,strategy,protocol,data,placement,defense,final_asr,final_acc"
    assert [r.split(",")[0] for r in rows[1:]] == ["central", "naive"]
    cfg.write_text(TINY + "\n[sweep]\naxis = K\nvalues = 1,2\n")
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "sweep.csv").read_text().splitlines()[0] == "axis_value,final_asr,final_acc"
    assert (out / "K_1" / "metrics.csv").exists() and (out / "sweep.png").exists()


def test_pretrain(cfg, tmp_path):
    cfg.write_text(TINY.split("[attack]")[0] + "\n[pretrain]\nfamily = ring:8\nn_runs = 8\nepochs = 5\n"
                   "held_out_fraction = 0.25\nhidden = 4\n")
    out = tmp_path / "p"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("distance_model.bin", "mae_by_distance.csv", "mae_baseline.csv", "training_curve.csv"):
        assert (out / name).exists()
    assert (out / "mae_by_distance.csv").read_text().startswith("true_distance,count,mae\n")


def test_console_module():
    r = subprocess.run([sys.executable, "-m", "dfl_backdoor", "validate-config", "--preset", "sanity"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("ok sanity")
