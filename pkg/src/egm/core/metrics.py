"""Sample-quality metrics: energy / magnetization W1, projected W2, mode occupancy."""

import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from scipy import optimize, spatial, stats

from .energy import GBRBMTarget, IsingTarget, JointMoGTarget, Target
from .types import MixedState

logger = logging.getLogger(__name__)


def _as_array(values) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def w1_1d(a, b) -> float:
    """Exact 1-Wasserstein distance between two equal-size 1-D samples."""
    a, b = _as_array(a).ravel(), _as_array(b).ravel()
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty samples")
    return float(stats.wasserstein_distance(a, b))


def w2_2d(a, b, subsample: int = 512, seed: int = 0) -> float:
    """2-Wasserstein distance between 2-D point sets by exact assignment.

    Both sets are subsampled without replacement to min(len(a), len(b), subsample)
    points with a seeded generator, then matched on squared Euclidean cost.
    """
    a, b = _as_array(a), _as_array(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    rng = np.random.default_rng(seed)
    m = min(len(a), len(b), subsample)
    a = a[rng.choice(len(a), size=m, replace=False)]
    b = b[rng.choice(len(b), size=m, replace=False)]
    cost = spatial.distance.cdist(a, b, metric="sqeuclidean")
    rows, cols = optimize.linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def magnetization(grid: torch.Tensor) -> torch.Tensor:
    """Average spin over the last two axes of a ±1 grid."""
    return grid.to(torch.float64).mean(dim=(-2, -1))


def energy_histogram(
    samples, reference=None, bins: int = 50
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Fixed-width histogram over the pooled range of sample and reference energies.

    Returns:
        Tuple: ``(edges, sample_counts, reference_counts or None)``
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    samples = _as_array(samples).ravel()
    pooled = samples if reference is None else np.concatenate([samples, _as_array(reference).ravel()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    ref_counts = None
    if reference is not None:
        ref_counts, _ = np.histogram(_as_array(reference).ravel(), bins=edges)
    return edges, counts, ref_counts


def histogram_rows(edges, counts, ref_counts=None):
    """CSV rows ``bin_lo,bin_hi,samples[,reference]``."""
    rows = []
    for i in range(len(counts)):
        row = {"bin_lo": edges[i], "bin_hi": edges[i + 1], "samples": int(counts[i])}
        if ref_counts is not None:
            row["reference"] = int(ref_counts[i])
        rows.append(row)
    return rows


def gbrbm_mode_centers(target: GBRBMTarget) -> torch.Tensor:
    """Distinct conditional means a + W x2 / 2 over all hidden configurations."""
    d = target.d_disc
    configs = torch.cartesian_prod(*[torch.tensor([0, 1])] * d).reshape(-1, d)
    _, means, _ = target.gaussian_conditional(configs)
    return torch.unique(means, dim=0)


def mode_occupancy(target: Target, states: MixedState) -> Dict[str, Any]:
    """Fraction of samples per mode.

    JointMoG: per coordinate, the share with x_i < 0 and x_i ≥ 0.
    GB-RBM: share of samples whose continuous part is nearest each mode center.
    """
    if isinstance(target, JointMoGTarget):
        positive = (states.cont >= 0).to(torch.float64).mean(dim=0)
        fractions = torch.stack([1 - positive, positive], dim=-1)
        return {
            "fractions": fractions.tolist(),
            "min_fraction": float(fractions.min()),
        }
    if isinstance(target, GBRBMTarget):
        centers = gbrbm_mode_centers(target)
        nearest = torch.cdist(states.cont, centers).argmin(dim=-1)
        fractions = torch.bincount(nearest, minlength=len(centers)).to(torch.float64)
        fractions = fractions / len(states)
        return {
            "centers": centers.tolist(),
            "fractions": fractions.tolist(),
            "min_fraction": float(fractions.min()),
        }
    return {}


def _match_sizes(a: MixedState, b: MixedState, seed: int) -> Tuple[MixedState, MixedState]:
    n = min(len(a), len(b))
    gen = torch.Generator().manual_seed(seed)
    if len(a) > n:
        a = a[torch.randperm(len(a), generator=gen)[:n]]
    if len(b) > n:
        b = b[torch.randperm(len(b), generator=gen)[:n]]
    return a, b


def evaluate(
    target: Target,
    samples: MixedState,
    reference: MixedState,
    subsample: int = 512,
    seed: int = 0,
) -> Dict[str, Any]:
    """E-W1 for every task, M-W1 for Ising, x-W2 when there are ≥ 2 continuous
    coordinates, mode occupancy for JointMoG and GB-RBM."""
    samples, reference = _match_sizes(samples, reference, seed)
    result: Dict[str, Any] = {"n": len(samples)}
    result["e_w1"] = w1_1d(target(samples), target(reference))
    if isinstance(target, IsingTarget):
        result["m_w1"] = w1_1d(
            magnetization(target.spins(samples)), magnetization(target.spins(reference))
        )
    if target.d_cont >= 2:
        result["x_w2"] = w2_2d(
            samples.cont[:, :2], reference.cont[:, :2], subsample=subsample, seed=seed
        )
        result["x_w2_subsample"] = min(len(samples), subsample)
    occupancy = mode_occupancy(target, samples)
    if occupancy:
        result["mode_occupancy"] = occupancy
    return result
