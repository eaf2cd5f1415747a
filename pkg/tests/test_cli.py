"""End-to-end tests for the orthonode command."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from orthonode import layers
from orthonode.cli import main

TINY_CONFIG = """
dataset:
  kind: synthetic
  classes: 2
  n_per_class: 12
  test_per_class: 6
  image_size: 8

model:
  arch_kind: {arch}
  pre_channels: 2
  hidden_channels: 4
  pools: 1
  precision: float64

train:
  epochs: 2
  batch_size: 8
  learning_rate: 0.05

solver:
  method: rk4
  fixed_steps: 2

attacks:
  - kind: gaussian
    sigma: 0.1
  - kind: fgsm
    epsilon: 5/255
  - kind: pgd
    epsilon: 0.1
    steps: 3

certify:
  pairs: 6
  trajectory_samples: 2

seed: 3
threads: 2
"""


@pytest.fixture
def write_config(tmp_path: Path):
    def write(arch: str = "ortho_ode") -> Path:
        path = tmp_path / f"{arch}.yaml"
        path.write_text(TINY_CONFIG.format(arch=arch))
        return path

    return write


def test_train_writes_outputs(tmp_path: Path, write_config):
    """train leaves a checkpoint, metrics and trajectory CSVs behind."""
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config()), "--out", str(out)]) == 0
    assert (out / "checkpoint.bin").is_file()
    metrics = json.loads((out / "metrics.json").read_text())
    assert list(metrics["accuracies"]) == ["clean", "gaussian-0.1", "fgsm-5/255", "pgd-0.1"]
    assert len(metrics["loss_curve"]) == 2
    assert metrics["lipschitz"]["dynamics_upper_bound"] == pytest.approx(1.0, abs=1e-6)
    assert metrics["config"]["seed"] == 3
    trajectory = pd.read_csv(out / "trajectories" / "sample_0.csv")
    assert list(trajectory.columns[:2]) == ["time", "state_norm"]
    assert (out / "trajectories" / "sample_1.csv").is_file()


def test_train_is_reproducible(tmp_path: Path, write_config):
    """Two runs with the same seed give identical metrics apart from timings."""
    config = str(write_config())
    runs = []
    for name in ("a", "b"):
        assert main(["train", "--config", config, "--out", str(tmp_path / name)]) == 0
        metrics = json.loads((tmp_path / name / "metrics.json").read_text())
        metrics.pop("timings")
        runs.append(metrics)
    runs[1]["config"]["out_dir"] = runs[0]["config"]["out_dir"]
    assert runs[0] == runs[1]


def test_certify_and_attack_eval(tmp_path: Path, write_config):
    """certify writes a certificate; attack-eval tabulates one row per checkpoint."""
    ortho, baseline = tmp_path / "ortho", tmp_path / "baseline"
    assert main(["train", "--config", str(write_config("ortho_ode")), "--out", str(ortho)]) == 0
    assert main(["train", "--config", str(write_config("resnet_baseline")), "--out", str(baseline)]) == 0

    cert_dir = tmp_path / "cert"
    assert main(["certify", "--checkpoint", str(ortho / "checkpoint.bin"), "--out", str(cert_dir)]) == 0
    certificate = json.loads((cert_dir / "certificate.json").read_text())
    assert certificate["lipschitz"]["upper"] == pytest.approx(1.0, abs=1e-6)
    assert certificate["lipschitz"]["consistent"] is True
    assert certificate["gronwall"]["violated"] is False
    assert certificate["gronwall"]["pairs_tested"] == 6
    assert "rho_estimate" in certificate["contraction"]
    assert certificate["flow_lipschitz"] <= np.e + 1e-6
    assert certificate["representation_gap"]["attack"] == "fgsm-5/255"

    table_dir = tmp_path / "table"
    code = main(
        [
            "attack-eval",
            "--checkpoint",
            str(ortho / "checkpoint.bin"),
            str(baseline / "checkpoint.bin"),
            "--out",
            str(table_dir),
        ]
    )
    assert code == 0
    table = pd.read_csv(table_dir / "table.csv", index_col="arch")
    assert list(table.index) == ["ortho_ode", "resnet_baseline"]
    assert list(table.columns) == ["clean", "gaussian-0.1", "fgsm-5/255", "pgd-0.1"]
    assert ((table >= 0) & (table <= 100)).all().all()


def test_input_errors_exit_with_one(tmp_path: Path):
    """Missing data files, configs and checkpoints all exit with code 1."""
    config = tmp_path / "mnist.yaml"
    config.write_text(
        "dataset:\n"
        "  kind: mnist\n"
        f"  train_images: {tmp_path}/none-images\n"
        f"  train_labels: {tmp_path}/none-labels\n"
        f"  test_images: {tmp_path}/none-images\n"
        f"  test_labels: {tmp_path}/none-labels\n"
    )
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "out")]) == 1
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 1
    assert main(["certify", "--checkpoint", str(tmp_path / "absent.bin")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  arch_kind: capsnet\n")
    assert main(["train", "--config", str(bad)]) == 1


def test_divergence_exits_with_two(tmp_path: Path, write_config, monkeypatch):
    """A non-finite training loss maps to exit code 2."""
    from orthonode import trainer

    monkeypatch.setattr(trainer, "cross_entropy", lambda logits, labels: (float("nan"), logits))
    assert main(["train", "--config", str(write_config()), "--out", str(tmp_path / "out")]) == 2


def test_selftest_passes():
    """The property suites pass on a healthy build."""
    assert main(["selftest"]) == 0


def test_selftest_detects_broken_cayley(monkeypatch, caplog):
    """A scaled Cayley transform fails the orthogonality property."""
    original = layers.cayley_blocks

    def broken(a):
        q, inverse = original(a)
        return 1.5 * q, inverse

    monkeypatch.setattr(layers, "cayley_blocks", broken)
    assert main(["selftest"]) == 3
    assert "orthogonality" in caplog.text
