"""Forward simulation of flow + masked-jump processes from t = 0 to t = 1."""

import logging
from typing import Callable, Union

import torch
from torch import nn

from ..models.nets import denoiser_to_rates
from .exceptions import InvalidStateError
from .paths import PathBundle
from .types import DTYPE, GeneratorEstimate, MixedState

logger = logging.getLogger(__name__)

GeneratorFn = Callable[[MixedState, torch.Tensor], GeneratorEstimate]


def sample_prior(path: PathBundle, batch: int, rng: torch.Generator) -> MixedState:
    """All-MASK tokens and N(0, I) (CondOT) or N(0, σ_max² I) (VE) coordinates."""
    return path.prior((batch,), rng)


def flow_euler_step(x: torch.Tensor, drift: torch.Tensor, h: float) -> torch.Tensor:
    if h <= 0:
        raise ValueError("step size must be positive")
    if not torch.isfinite(drift).all():
        raise InvalidStateError("non-finite drift")
    return x + h * drift


def jump_euler_step(
    x: torch.Tensor,
    rates: torch.Tensor,
    h: float,
    rng: torch.Generator,
    mask_id: int,
) -> torch.Tensor:
    """First-order CTMC step for masked tokens.

    Each masked position moves to token y with probability h · rate(y); when the
    row total exceeds 1 the probabilities are rescaled to sum to 1. Unmasked
    positions never change.

    Args:
        x: ``(*batch, D)`` token ids
        rates: ``(*batch, D, V)`` nonnegative rates
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if torch.any(rates < 0):
        raise InvalidStateError("negative jump rate")
    probs = h * rates
    total = probs.sum(dim=-1, keepdim=True)
    probs = torch.where(total > 1, probs / total, probs)
    masked = x == mask_id
    probs = probs * masked.unsqueeze(-1)
    cdf = probs.cumsum(dim=-1)
    u = torch.rand(x.shape, generator=rng, dtype=DTYPE).unsqueeze(-1)
    # V means "no jump"
    choice = (u >= cdf).sum(dim=-1)
    return torch.where(choice < rates.shape[-1], choice, x)


def model_generator(sampler: nn.Module, path: PathBundle) -> GeneratorFn:
    """Wrap a sampler network as a generator field (rates, drift)."""

    def field(x: MixedState, t: torch.Tensor) -> GeneratorEstimate:
        probs, drift = sampler(x, t)
        if path.discrete is not None:
            rates = denoiser_to_rates(probs, x, path.discrete, t)
        else:
            rates = probs
        return GeneratorEstimate(rates=rates, drift=drift)

    return field


@torch.no_grad()
def simulate(
    sampler: Union[nn.Module, GeneratorFn],
    path: PathBundle,
    n_steps: int,
    batch: int,
    rng: torch.Generator,
) -> MixedState:
    """Integrate on the uniform grid t_k = k / n_steps and return terminal states.

    The generator is evaluated at the left end of every step. Positions still
    masked at t = 1 are returned as MASK for the caller to resolve.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    field = model_generator(sampler, path) if isinstance(sampler, nn.Module) else sampler
    h = 1.0 / n_steps
    x = sample_prior(path, batch, rng)
    for k in range(n_steps):
        t = torch.full((batch,), k * h, dtype=DTYPE)
        gen = field(x, t)
        disc = x.disc
        if path.discrete is not None:
            disc = jump_euler_step(disc, gen.rates, h, rng, path.mask_id)
        cont = x.cont
        if path.continuous is not None:
            cont = flow_euler_step(cont, gen.drift, h)
        x = MixedState(disc=disc, cont=cont)

    if path.discrete is not None:
        residual = int((x.disc == path.mask_id).sum())
        if residual:
            logger.debug(f"{residual} token(s) still masked at t = 1")
    return x
