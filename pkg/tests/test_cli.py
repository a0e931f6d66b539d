import csv
import json
import os
import subprocess
import sys

import pytest

from photonvit.cli import apply_overrides, main
from photonvit.config import defaults, load_config, parse_config
from photonvit.errors import ConfigError

TINY = """\
[run]
seed = 3

[vit]
image_size = 8
patch_size = 4
d_model = 16
n_heads = 2
n_layers = 1
n_classes = 2

[data]
n_train_per_class = 8
n_test_per_class = 8
separation = 2.5

[train]
epochs = 2
batch_size = 8

[finetune]
epochs = 1

[cct]
anneal_epochs = 1
k = 2

[eval]
trials = 2

[sweep]
sigma_fab_list = 0.1, 0.4

[matmul]
m = 4
k = 40
n = 70
trials = 20
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_defaults_and_canonical_round_trip():
    cfg = defaults()
    assert cfg["eval"]["trials"] == 10
    assert cfg["sweep"]["sigma_fab_list"] == (0.05, 0.1, 0.2, 0.4, 0.7)
    again = parse_config(cfg.canonical())
    assert again.canonical() == cfg.canonical() and again.sha256() == cfg.sha256()


def test_config_diagnostics_carry_line_numbers(tmp_path):
    path = tmp_path / "x.ini"
    path.write_text("[noise]\nbogus = 1\n")
    with pytest.raises(ConfigError, match=r"x\.ini:2 \[noise\] bogus: unknown key"):
        load_config(path)
    path.write_text("[run]\nseed = 1\n\n[vit]\nd_model = 10\nn_heads = 3\n")
    with pytest.raises(ConfigError, match=r"x\.ini:4 \[vit\]"):
        load_config(path)
    path.write_text("[train]\nepochs = -1\n")
    with pytest.raises(ConfigError, match=r"x\.ini:2 \[train\] epochs: must be >= 1"):
        load_config(path)
    path.write_text("[nope]\n")
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_overrides():
    cfg = apply_overrides(defaults(), ["noise.sigma_fab=0.2", "cct.active_layers=0,2"])
    assert cfg.noise.sigma_fab == 0.2 and cfg.cct.active_layers == (0, 2)
    for bad in (["noise.sigma_fab"], ["nosuch.key=1"], ["noise.sigma_fab=abc"], ["noise.sigma_fab=-1"]):
        with pytest.raises(ConfigError):
            apply_overrides(defaults(), bad)


def test_exit_codes(tmp_path, tiny_cfg, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[noise]\nbogus = 1\n")
    assert main(["energy-report", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bad.ini:2" in capsys.readouterr().err
    assert main(["export-lut", "--bits", "5", "--out", str(tmp_path / "o")]) == 2
    assert main(["evaluate", "--config", str(tiny_cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["replay", str(tmp_path / "none.json")]) == 2


def test_energy_report_outputs_and_manifest(tmp_path):
    out = tmp_path / "energy"
    assert main(["energy-report", "--out", str(out)]) == 0
    totals = {row[0]: row for row in read_csv(out / "energy_totals.csv")[1:]}
    assert set(totals) == {"Tiny", "Small", "Base", "Large"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "energy-report" and manifest["seed"] == 0
    for name in ("energy_totals.csv", "energy_breakdown.csv"):
        assert name in manifest["outputs"]
    assert any(name.endswith(".png") for name in manifest["outputs"])
    assert parse_config(manifest["config"]).sha256() == manifest["config_sha256"]


def test_small_commands_run(tmp_path, tiny_cfg):
    for cmd in (["export-lut", "--bits", "4"], ["export-variation-map", "--set", "variation.width_mm=2",
                                                 "--set", "variation.height_mm=2"],
                ["simulate-matmul", "--config", str(tiny_cfg)], ["fit-coeffs"]):
        out = tmp_path / cmd[0]
        assert main(cmd + ["--out", str(out)]) == 0, cmd
        assert (out / "manifest.json").is_file()
    lut = read_csv(tmp_path / "export-lut" / "lut_4bit.csv")
    assert len(lut) == 17


def test_train_resume_is_bit_exact(tmp_path, tiny_cfg):
    straight = tmp_path / "straight"
    assert main(["train", "--config", str(tiny_cfg), "--out", str(straight)]) == 0
    half = tmp_path / "half"
    assert main(["train", "--config", str(tiny_cfg), "--set", "train.epochs=1", "--out", str(half)]) == 0
    resumed = tmp_path / "resumed"
    assert main(["train", "--config", str(tiny_cfg), "--resume", str(half / "checkpoint"),
                 "--out", str(resumed)]) == 0
    assert (resumed / "metrics.csv").read_bytes() == (straight / "metrics.csv").read_bytes()

    ft = tmp_path / "ft"
    assert main(["train", "--config", str(tiny_cfg), "--mode", "cct-naln", "--init",
                 str(straight / "checkpoint"), "--out", str(ft)]) == 0
    ev = tmp_path / "ev"
    assert main(["evaluate", "--config", str(tiny_cfg), "--checkpoint", str(ft / "checkpoint"),
                 "--out", str(ev)]) == 0
    assert len(read_csv(ev / "eval_trials.csv")) == 3


def test_sweep_noise_clean_row_constant(tmp_path, tiny_cfg):
    out = tmp_path / "sweep"
    assert main(["sweep-noise", "--config", str(tiny_cfg), "--modes", "normal-ft", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")[1:]
    clean = {r[2] for r in rows if r[1] == "clean"}
    assert len(clean) == 1
    assert {r[0] for r in rows} == {"0.1", "0.4"}
    assert len(rows) == 2 * 3


def test_replay_reproduces_bytes(tmp_path, tiny_cfg):
    first = tmp_path / "first"
    assert main(["simulate-matmul", "--config", str(tiny_cfg), "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert main(["replay", str(first / "manifest.json"), "--out", str(second)]) == 0
    a = json.loads((first / "manifest.json").read_text())["outputs"]
    b = json.loads((second / "manifest.json").read_text())["outputs"]
    csvs = [k for k in a if k.endswith(".csv")]
    assert csvs and all(a[k] == b[k] for k in csvs)


def test_module_entry_point(tmp_path):
    env = dict(os.environ, OPENBLAS_NUM_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "photonvit.cli", "export-lut", "--bits", "32",
                           "--out", str(tmp_path / "x")], capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and "error" in proc.stderr
