"""Monte-Carlo estimators of the marginal generator and intermediate energies.

All estimators are self-normalized: the same K draws feed numerator and
denominator, and weights are formed in log space with a softmax.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import torch

from ..config import settings
from .exceptions import DegenerateWeightsError
from .paths import PathBundle, Time, as_time
from .types import DTYPE, GeneratorEstimate, MixedState

logger = logging.getLogger(__name__)

# a row whose best log-weight is below this carries no usable mass
DEGENERATE_LOG_WEIGHT = -1e6

EnergyFn = Callable[[MixedState], torch.Tensor]
TimedEnergyFn = Callable[[MixedState, torch.Tensor], torch.Tensor]


@dataclass
class EstimatorDiagnostics:
    """Running record of weight quality across estimator calls."""

    ess: List[float] = field(default_factory=list)
    degenerate: int = 0

    def record(self, log_weights: torch.Tensor):
        self.ess.extend(normalized_ess(log_weights).flatten().tolist())

    @property
    def ess_mean(self) -> float:
        return sum(self.ess) / len(self.ess) if self.ess else float("nan")

    def reset(self):
        self.ess.clear()
        self.degenerate = 0

    def model_dump(self):
        return {"ess_mean": self.ess_mean, "degenerate": self.degenerate}


def log_mean_exp(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """log((1/K) Σ exp(v_i)) along ``dim`` with a max shift."""
    values = torch.as_tensor(values, dtype=DTYPE)
    if values.dim() == 0 or values.shape[dim] == 0:
        raise ValueError("log_mean_exp of an empty set")
    return torch.logsumexp(values, dim=dim) - math.log(values.shape[dim])


def normalized_ess(log_weights: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """(Σ w)² / (n Σ w²), computed from log-weights.

    Raises:
        DegenerateWeightsError: If every weight of a row is zero
    """
    log_weights = torch.as_tensor(log_weights, dtype=DTYPE)
    if log_weights.dim() == 0 or log_weights.shape[dim] == 0:
        raise ValueError("normalized_ess of an empty set")
    if torch.any(torch.isneginf(log_weights.amax(dim=dim))):
        raise DegenerateWeightsError("all importance weights are zero")
    n = log_weights.shape[dim]
    # 2 log Σw − log Σw², both shifted by the row max
    log_num = 2 * torch.logsumexp(log_weights, dim=dim)
    log_den = torch.logsumexp(2 * log_weights, dim=dim)
    return torch.exp(log_num - log_den) / n


def self_normalize(
    log_weights: torch.Tensor,
    fallback: bool = False,
    diagnostics: Optional[EstimatorDiagnostics] = None,
) -> torch.Tensor:
    """Softmax over the trailing (sample) axis.

    Rows without usable mass raise unless ``fallback`` is set, in which case
    they get uniform weights and are counted.
    """
    log_weights = torch.nan_to_num(log_weights, nan=-math.inf)
    best = log_weights.amax(dim=-1)
    degenerate = ~(best > DEGENERATE_LOG_WEIGHT)
    if torch.any(degenerate):
        count = int(degenerate.sum())
        if not fallback:
            raise DegenerateWeightsError(
                f"{count} estimate(s) have no usable importance weight"
            )
        logger.warning(f"Degenerate weights in {count} estimate(s), using uniform")
        if diagnostics is not None:
            diagnostics.degenerate += count
        log_weights = torch.where(
            degenerate.unsqueeze(-1), torch.zeros_like(log_weights), log_weights
        )
    if diagnostics is not None:
        diagnostics.record(log_weights)
    return torch.softmax(log_weights, dim=-1)


def evaluate_energy(
    energy: Callable,
    states: MixedState,
    times: Optional[torch.Tensor] = None,
    chunk_size: Optional[int] = None,
) -> torch.Tensor:
    """Evaluate ``energy`` over all batch axes of ``states`` in bounded chunks.

    Args:
        energy: ``energy(states)`` or, with ``times``, ``energy(states, times)``
        states: States of any batch shape
        times: Per-state times, broadcastable to the batch shape
        chunk_size: States per call; ``settings.estimator_chunk_size`` if None
    """
    chunk = chunk_size or settings.estimator_chunk_size
    batch_shape = states.batch_shape
    flat = states.flatten()
    n = flat.batch_shape[0]
    if times is not None:
        times = torch.as_tensor(times, dtype=DTYPE).expand(batch_shape).reshape(-1)
    if n == 0:
        return torch.zeros(batch_shape, dtype=DTYPE)
    out = []
    for start in range(0, n, chunk):
        part = flat[start : start + chunk]
        if times is None:
            out.append(energy(part))
        else:
            out.append(energy(part, times[start : start + chunk]))
    return torch.cat(out).reshape(batch_shape)


def _shared_support(support: MixedState, batch_shape) -> MixedState:
    """Broadcast an ``(N, ...)`` support set against every batch item."""
    n = support.batch_shape[-1]
    lead = (1,) * len(batch_shape)
    return support.reshape(*lead, n).expand(*batch_shape, n)


@torch.no_grad()
def snis_generator(
    x_t: MixedState,
    t: Time,
    path: PathBundle,
    energy: EnergyFn,
    K: int,
    rng: torch.Generator,
    *,
    x1: Optional[MixedState] = None,
    diagnostics: Optional[EstimatorDiagnostics] = None,
    fallback: bool = False,
) -> GeneratorEstimate:
    """Self-normalized estimate of the marginal generator at (x_t, t).

    Args:
        x_t: States of batch shape ``batch``
        t: Times in [t_min, 1)
        path: Product path
        energy: Target energy E_1
        K: Number of proposal draws per state
        rng: Random stream
        x1: Optional ``(N,)``-batched support enumerated instead of drawing; each
            point is weighted by exp(−E_1) p_{t|1}(x_t|x1)
        diagnostics: Accumulates ESS and degenerate counts
        fallback: Uniform weights instead of raising on degenerate rows

    Returns:
        GeneratorEstimate: Estimate with batch shape ``batch``
    """
    t = as_time(t, x_t.batch_shape)
    if x1 is None:
        x1, _ = path.proposal_1_given_t(x_t, t, K, rng)
        log_w = -evaluate_energy(energy, x1)
    else:
        x1 = _shared_support(x1, x_t.batch_shape)
        log_w = -evaluate_energy(energy, x1) + path.log_prob_t_given_1(
            x_t.unsqueeze(-1), x1, t.unsqueeze(-1)
        )
    weights = self_normalize(log_w, fallback=fallback, diagnostics=diagnostics)
    cond = path.cond_generator_t1(x_t.unsqueeze(-1), x1, t.unsqueeze(-1))
    return cond.weighted_sum(weights)


@torch.no_grad()
def intermediate_energy_target(
    x_r: MixedState,
    r: Time,
    path: PathBundle,
    energy: EnergyFn,
    K: int,
    rng: torch.Generator,
    *,
    fallback: bool = False,
) -> torch.Tensor:
    """Ê_r(x_r) = −log (1/K) Σ exp(−E_1(x1_i)) − log Z_{1|r}(x_r), x1_i ~ q_{1|r}.

    Rows with no usable draw return +inf when ``fallback`` is set.
    """
    r = as_time(r, x_r.batch_shape)
    x1, _ = path.proposal_1_given_t(x_r, r, K, rng)
    log_w = -evaluate_energy(energy, x1)
    degenerate = ~(log_w.amax(dim=-1) > DEGENERATE_LOG_WEIGHT)
    if torch.any(degenerate):
        if not fallback:
            raise DegenerateWeightsError("intermediate energy target has no usable draw")
        logger.warning(
            f"Intermediate energy target degenerate for {int(degenerate.sum())} state(s)"
        )
    return -log_mean_exp(log_w) - path.log_Z_1_given_r(x_r, r)


@torch.no_grad()
def bootstrap_generator(
    x_t: MixedState,
    t: Time,
    r: Time,
    path: PathBundle,
    energy_model: TimedEnergyFn,
    K: int,
    rng: torch.Generator,
    *,
    target: Optional[EnergyFn] = None,
    x_r: Optional[MixedState] = None,
    diagnostics: Optional[EstimatorDiagnostics] = None,
    fallback: bool = False,
) -> GeneratorEstimate:
    """Bootstrapped generator estimate from a nearby time r > t.

    Args:
        energy_model: Intermediate energy ``E_r(x_r, r)``
        target: True energy; used instead of ``energy_model`` wherever r = 1
        x_r: Optional ``(N,)``-batched support enumerated instead of drawing;
            each point is weighted by exp(−E_r) p_{t|r}(x_t|x_r)

    Returns:
        GeneratorEstimate: Estimate with the batch shape of ``x_t``
    """
    t = as_time(t, x_t.batch_shape)
    r = as_time(r, x_t.batch_shape)
    if x_r is None:
        x_r, _ = path.proposal_r_given_t(x_t, t, r, K, rng)
        extra = None
    else:
        x_r = _shared_support(x_r, x_t.batch_shape)
        extra = path.backward_kernel_logpdf(
            x_t.unsqueeze(-1), x_r, t.unsqueeze(-1), r.unsqueeze(-1)
        )

    r_draws = r.unsqueeze(-1).expand(x_r.batch_shape)
    at_target = r >= 1 if target is not None else torch.zeros_like(r, dtype=torch.bool)
    energies = torch.empty(x_r.batch_shape, dtype=DTYPE)
    if torch.any(at_target):
        energies[at_target] = evaluate_energy(target, x_r[at_target])
    if not torch.all(at_target):
        rest = ~at_target
        energies[rest] = evaluate_energy(energy_model, x_r[rest], r_draws[rest])

    log_w = -energies if extra is None else extra - energies
    weights = self_normalize(log_w, fallback=fallback, diagnostics=diagnostics)
    cond = path.cond_generator_tr(
        x_t.unsqueeze(-1), x_r, t.unsqueeze(-1), r.unsqueeze(-1)
    )
    return cond.weighted_sum(weights)


def clip_generator(estimate: GeneratorEstimate, max_norm: float) -> GeneratorEstimate:
    """Clip the drift and every per-position rate row to an L2 norm of ``max_norm``."""

    def _clip(v: torch.Tensor) -> torch.Tensor:
        norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
        scale = (max_norm / norm.clamp_min(1e-300)).clamp(max=1.0)
        return v * scale

    return GeneratorEstimate(rates=_clip(estimate.rates), drift=_clip(estimate.drift))


def clip_energy(values: torch.Tensor, max_abs: float) -> torch.Tensor:
    return values.clamp(min=-max_abs, max=max_abs)
