"""Tests for the command-line surface."""

import json

import pytest

from egm.cli import build_parser, main, task_spec
from egm.core.exceptions import ConfigError
from egm.core.storage import read_samples
from egm.core.types import IsingSpec, JointMoGSpec


def test_parser():
    parser = build_parser()
    args = parser.parse_args(["train", "--config", "c.toml", "--epsilon", "0.05", "--resume"])
    assert args.command == "train" and args.resume and args.epsilon == 0.05
    args = parser.parse_args(["oracle", "--task", "ising", "--L", "2", "--K", "10,100"])
    assert args.K == [10, 100]
    args = parser.parse_args(["sweep-eps", "--config", "c.toml", "--eps", "0.01,0.05"])
    assert args.eps == [0.01, 0.05]
    with pytest.raises(SystemExit):
        parser.parse_args(["sample"])


def test_task_spec_from_flags(config_dir):
    parser = build_parser()
    args = parser.parse_args(["eval", "--samples", "a", "--reference", "b", "--task", "jointmog", "--d", "3"])
    assert task_spec(args) == JointMoGSpec(d=3)
    args = parser.parse_args(
        ["eval", "--samples", "a", "--reference", "b", "--config", str(config_dir / "ising5_b04.toml")]
    )
    assert task_spec(args) == IsingSpec(L=5, beta=0.4)
    args = parser.parse_args(["eval", "--samples", "a", "--reference", "b"])
    with pytest.raises(ConfigError):
        task_spec(args)


def test_gibbs_command(tmp_path, capsys):
    out = tmp_path / "gibbs.bin"
    code = main(
        [
            "gibbs", "--task", "ising", "--L", "2", "--beta", "0.2",
            "--n", "12", "--chains", "2", "--sweeps", "40", "--burn-in", "10",
            "--out", str(out),
        ]
    )
    assert code == 0
    states, vocab_size = read_samples(out)
    assert states.disc.shape == (12, 4)
    assert vocab_size == 2
    assert json.loads(capsys.readouterr().out)["n"] == 12


def test_gibbs_then_eval(tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    common = ["--task", "ising", "--L", "2", "--n", "20", "--chains", "2", "--sweeps", "60", "--burn-in", "10"]
    assert main(["gibbs", "--seed", "1", "--out", str(a), *common]) == 0
    assert main(["gibbs", "--seed", "2", "--out", str(b), *common]) == 0
    capsys.readouterr()

    histogram = tmp_path / "hist.csv"
    code = main(
        [
            "eval", "--samples", str(a), "--reference", str(b),
            "--task", "ising", "--L", "2", "--histogram", str(histogram), "--bins", "5",
        ]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n"] == 20
    assert report["e_w1"] >= 0 and report["m_w1"] >= 0
    assert len(histogram.read_text().splitlines()) == 6


def test_oracle_command(tmp_path, capsys):
    table = tmp_path / "oracle.csv"
    code = main(
        [
            "oracle", "--task", "ising", "--L", "2", "--grid", "3",
            "--K", "10,100", "--seeds", "0,1,2", "--out", str(table),
        ]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kernel_checks"] == 3
    assert report["max_deviation"] < 1e-9
    assert len(report["snis"]["rows"]) == 2


def test_errors_return_one(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.toml")]) == 1
    assert "config error" in capsys.readouterr().err
    assert main(["sample", "--checkpoint", str(tmp_path), "--out", str(tmp_path / "s.bin")]) == 1


def test_unwritable_outputs_return_one(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    config = tmp_path / "tiny.toml"
    config.write_text('[task]\ntask = "ising"\nL = 2\n')
    assert main(["train", "--config", str(config), "--output", str(blocker)]) == 1
    assert "cannot create directory" in capsys.readouterr().err

    occupied = tmp_path / "occupied"
    occupied.mkdir()
    code = main(
        [
            "gibbs", "--task", "ising", "--L", "2", "--n", "4", "--chains", "1",
            "--sweeps", "8", "--burn-in", "0", "--out", str(occupied),
        ]
    )
    assert code == 1
    assert "cannot write" in capsys.readouterr().err
