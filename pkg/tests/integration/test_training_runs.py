"""End-to-end training runs: run directory layout, resume, and the CLI pipeline."""

import csv
import json
import math
import shutil

import pytest
import torch

from egm.cli import main
from egm.config import load_config
from egm.core.storage import METRICS_COLUMNS, read_samples
from egm.core.training import load_trained, train

TINY_TOML = """
seed = 3
num_mc_samples = 16
batch_size = 8
outer_iterations = 2
inner_iterations = 4
samples_per_outer = 16
buffer_capacity = 64
simulation_steps = 10
epsilon = 0.05
log_interval = 2

[task]
task = "ising"
L = 2
beta = 0.2

[net]
hidden_dim = 16
num_layers = 2
time_embed_dim = 8
cont_embed_dim = 8
"""


def read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_bootstrap_run_layout(ising_config, tmp_path):
    result = train(ising_config, tmp_path / "run")
    root = tmp_path / "run"
    assert (root / "manifest.json").exists()
    assert (root / "checkpoints" / "outer_0001" / "manifest.json").exists()
    assert (root / "checkpoints" / "outer_0002" / "manifest.json").exists()

    rows = read_metrics(result.metrics_path)
    assert list(rows[0]) == METRICS_COLUMNS
    # inner 3 with log interval 2: a row at inner 1 and at the last inner step
    assert [(row["outer"], row["inner"]) for row in rows] == [
        ("0", "1"),
        ("0", "2"),
        ("1", "1"),
        ("1", "2"),
    ]
    assert all(math.isfinite(float(row["loss_egm"])) for row in rows)
    assert all(0 < float(row["ess_mean"]) <= 1 for row in rows)

    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert len(manifest["checkpoint_paths"]) == 2
    assert result.energy_net is not None
    assert len(result.buffer) == 2 * ising_config.samples_per_outer


def test_plain_run_on_mixed_task(mog_config, tmp_path):
    result = train(mog_config, tmp_path / "mog")
    rows = read_metrics(result.metrics_path)
    assert len(rows) == mog_config.inner_steps
    assert all(row["loss_nem"] == "nan" for row in rows)
    assert result.energy_net is None
    states = result.buffer.states()
    assert torch.isfinite(states.cont).all()
    assert torch.all(states.disc != 2)


def test_resume_is_bitwise(ising_config, tmp_path):
    straight = train(ising_config, tmp_path / "a")

    train(ising_config, tmp_path / "b")
    shutil.rmtree(tmp_path / "b" / "checkpoints" / "outer_0002")
    resumed = train(ising_config, tmp_path / "b", resume=True)

    for p, q in zip(straight.sampler.parameters(), resumed.sampler.parameters()):
        assert torch.equal(p, q)
    for p, q in zip(straight.energy_net.parameters(), resumed.energy_net.parameters()):
        assert torch.equal(p, q)
    assert straight.buffer.states().equal(resumed.buffer.states())
    assert len(read_metrics(resumed.metrics_path)) == len(read_metrics(straight.metrics_path))


def test_resume_without_checkpoint_starts_fresh(mog_config, tmp_path):
    fresh = train(mog_config, tmp_path / "x", resume=True)
    again = train(mog_config, tmp_path / "y")
    for p, q in zip(fresh.sampler.parameters(), again.sampler.parameters()):
        assert torch.equal(p, q)


def test_fresh_run_in_used_directory(ising_config, tmp_path):
    root = tmp_path / "run"
    train(ising_config, root)
    second = ising_config.model_copy(update={"seed": 11, "outer_iterations": 1})
    result = train(second, root)

    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["seed"] == 11
    assert manifest["config"]["outer_iterations"] == 1
    assert manifest["checkpoint_paths"] == [str(root / "checkpoints" / "outer_0001")]
    assert not (root / "checkpoints" / "outer_0002").exists()
    assert {row["outer"] for row in read_metrics(result.metrics_path)} == {"0"}

    # a later resume continues the second run, not the first
    trainer = load_trained(root / "checkpoints" / "outer_0001")
    assert trainer.config.seed == 11


def test_load_trained(ising_config, tmp_path):
    result = train(ising_config, tmp_path / "run")
    trainer = load_trained(tmp_path / "run" / "checkpoints" / "outer_0002")
    assert trainer.outer == 2
    assert trainer.config == ising_config
    for p, q in zip(result.sampler.parameters(), trainer.sampler.parameters()):
        assert torch.equal(p, q)


def test_cli_pipeline(tmp_path, capsys):
    config = tmp_path / "tiny.toml"
    config.write_text(TINY_TOML)
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--output", str(run)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["manifest"]["status"] == "completed"

    checkpoint = run / "checkpoints" / "outer_0002"
    samples = tmp_path / "samples.bin"
    assert main(["sample", "--checkpoint", str(checkpoint), "--n", "40", "--out", str(samples)]) == 0
    states, _ = read_samples(samples)
    assert states.disc.shape == (40, 4)
    assert torch.all(states.disc != 2)

    reference = tmp_path / "reference.bin"
    assert main(
        [
            "gibbs", "--config", str(config), "--n", "40", "--chains", "2",
            "--sweeps", "100", "--burn-in", "20", "--out", str(reference),
        ]
    ) == 0
    capsys.readouterr()
    assert main(
        ["eval", "--config", str(config), "--samples", str(samples), "--reference", str(reference)]
    ) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["e_w1"] >= 0

    trace = tmp_path / "ess.csv"
    assert main(
        ["ess", "--checkpoint", str(checkpoint), "--grid", "3", "--batch", "4", "--out", str(trace)]
    ) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [round(row["t"], 3) for row in rows] == [0.001, 0.5, 0.999]
    assert all(0 < row["ess_plain"] <= 1 and 0 < row["ess_bootstrap"] <= 1 for row in rows)


def test_cli_overrides(tmp_path, capsys):
    config = tmp_path / "tiny.toml"
    config.write_text(TINY_TOML)
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--output", str(run), "--outer", "1", "--seed", "9"]) == 0
    manifest = json.loads(capsys.readouterr().out)["manifest"]
    assert manifest["seed"] == 9
    assert manifest["config"]["outer_iterations"] == 1
    assert not (run / "checkpoints" / "outer_0002").exists()


@pytest.mark.slow
def test_smoke_config(config_dir, tmp_path):
    config = load_config(config_dir / "smoke.toml")
    result = train(config, tmp_path / "smoke")
    rows = read_metrics(result.metrics_path)
    assert len(rows) == config.outer_iterations * 2
    assert all(math.isfinite(float(row["loss_egm"])) for row in rows)
    assert result.diagnostics["skipped_steps"] == 0
