"""MCP tools for sampler operations as standalone functions."""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from pydantic import TypeAdapter

from ...core.baselines import ground_truth as generate_ground_truth
from ...core.energy import build_target
from ...core.metrics import evaluate
from ...core.oracle import (
    check_chapman_kolmogorov,
    check_consistency_eq13,
    snis_convergence_report,
)
from ...core.paths import build_path
from ...core.storage import read_samples, write_samples
from ...core.training import Trainer, draw_samples as simulate_samples, load_trained
from ...core.types import DTYPE, EnergySpec, IsingSpec, MixedState

logger = logging.getLogger(__name__)

# Global state to be initialized by the server
runs_dir: Optional[Path] = None
trainers: Dict[str, Trainer] = {}


def init(root: Path):
    """Set the directory relative paths resolve against and drop cached checkpoints."""
    global runs_dir
    runs_dir = Path(root)
    runs_dir.mkdir(parents=True, exist_ok=True)
    trainers.clear()


def _resolve(path: str) -> Path:
    if runs_dir is None:
        raise RuntimeError("sampler tools not initialized; call init() first")
    p = Path(path)
    return p if p.is_absolute() else runs_dir / p


def _trainer(checkpoint: str) -> Trainer:
    key = str(_resolve(checkpoint))
    if key not in trainers:
        trainers[key] = load_trained(Path(key))
    return trainers[key]


async def draw_samples(
    checkpoint: str, out: str, n: int = 2000, steps: Optional[int] = None, seed: int = 0
) -> Dict[str, Any]:
    """Simulate terminal samples from a checkpoint and write them to a sample file.

    Args:
        checkpoint: Checkpoint directory
        out: Output sample file
        n: Number of samples
        steps: Simulation steps; the run's setting when omitted
        seed: Random seed

    Returns:
        Dict[str, Any]: Output path, count and number of resolved masks
    """
    trainer = _trainer(checkpoint)
    rng = torch.Generator().manual_seed(seed)
    states, resolved = simulate_samples(
        trainer.sampler, trainer.path, n, steps or trainer.config.simulation_steps, rng
    )
    path = write_samples(states, _resolve(out), trainer.target.vocab_size)
    energies = trainer.target(states)
    return {
        "samples": str(path),
        "n": n,
        "resolved_masks": resolved,
        "energy_mean": float(energies.mean()),
    }


async def evaluate_samples(
    samples: str, reference: str, task: Dict[str, Any], subsample: int = 512, seed: int = 0
) -> Dict[str, Any]:
    """Compare two sample files: E-W1, M-W1 (Ising), x-W2 and mode occupancy.

    Args:
        samples: Sample file to score
        reference: Reference sample file
        task: Task parameters, e.g. ``{"task": "ising", "L": 5, "beta": 0.2}``
    """
    spec = TypeAdapter(EnergySpec).validate_python(task)
    states, _ = read_samples(_resolve(samples))
    ref, _ = read_samples(_resolve(reference))
    return evaluate(build_target(spec), states, ref, subsample=subsample, seed=seed)


async def consistency_report(
    t: float,
    r: float,
    d_disc: int = 1,
    d_cont: int = 1,
    continuous: str = "cond_ot",
    n_mc: int = 100_000,
    seed: int = 0,
) -> Dict[str, Any]:
    """Bootstrap-kernel consistency and Chapman-Kolmogorov checks at one (t, r)."""
    path = build_path(d_disc, d_cont, continuous=continuous)
    rng = torch.Generator().manual_seed(seed)
    x1 = MixedState(
        disc=torch.randint(0, path.vocab_size, (d_disc,), generator=rng),
        cont=torch.randn(d_cont, generator=rng, dtype=DTYPE),
    )
    x_t = path.sample_t_given_1(x1, t, rng)
    return {
        "consistency": check_consistency_eq13(path, t, r, x1, x_t, n_mc, rng),
        "chapman_kolmogorov": check_chapman_kolmogorov(path, t, r, x1, n_mc, rng),
    }


async def snis_report(
    t: float = 0.5,
    K: Optional[List[int]] = None,
    seeds: Optional[List[int]] = None,
    L: int = 2,
    beta: float = 0.2,
    epsilon: Optional[float] = None,
) -> Dict[str, Any]:
    """SNIS error against exact enumeration on a small Ising lattice, per K."""
    target = build_target(IsingSpec(L=L, beta=beta))
    path = build_path(target.d_disc, 0)
    return snis_convergence_report(
        target, path, t, K or [10, 100, 1000], seeds or list(range(5)), epsilon=epsilon
    )


async def ground_truth(
    task: Dict[str, Any], out: str, n: int = 2000, seed: int = 0
) -> Dict[str, Any]:
    """Generate reference samples with the per-task recipe and write them to a file."""
    spec = TypeAdapter(EnergySpec).validate_python(task)
    target = build_target(spec)
    states = generate_ground_truth(target, n, torch.Generator().manual_seed(seed))
    path = write_samples(states, _resolve(out), target.vocab_size)
    logger.info(f"Wrote {n} {target.name} reference samples to {path}")
    return {"samples": str(path), "n": len(states)}
