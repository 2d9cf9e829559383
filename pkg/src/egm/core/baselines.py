"""Reference MCMC samplers and ground-truth generation recipes."""

import logging
import math
from typing import Optional

import torch

from .energy import (
    GBRBMTarget,
    IsingTarget,
    JointDW4Target,
    JointMoGTarget,
    Target,
    exact_sample_jointmog,
    lattice_edges,
)
from .exceptions import UnsupportedTaskError
from .types import DTYPE, GBRBMSpec, IsingSpec, MixedState

logger = logging.getLogger(__name__)

# (chains, burn-in sweeps, thinning) per task
GROUND_TRUTH_RECIPES = {
    "ising": (4, 10_000, 10),
    "gbrbm": (100, 10_000, 100),
    "jointdw4": (100, 10_000, 50),
}


def lattice_neighbours(L: int) -> torch.Tensor:
    """``(L², 4)`` periodic neighbour indices of every site."""
    edges = lattice_edges(L)
    nbrs = [[] for _ in range(L * L)]
    for i, j in edges.tolist():
        nbrs[i].append(j)
        nbrs[j].append(i)
    return torch.tensor(nbrs)


def _keep(step: int, burn_in: int, thin: int) -> bool:
    return step >= burn_in and (step - burn_in) % thin == thin - 1


def gibbs_ising(
    spec: IsingSpec,
    chains: int = 4,
    steps: int = 6000,
    rng: Optional[torch.Generator] = None,
    burn_in: int = 0,
    thin: int = 1,
) -> torch.Tensor:
    """Heat-bath Gibbs sampling, one step being one raster-order lattice sweep.

    p(x_i = +1 | rest) = logistic(2β(J Σ_{j~i} x_j − μ)).

    Returns:
        torch.Tensor: ``(n, L, L)`` ±1 spins, every kept post-sweep state of every
        chain (chain-major)
    """
    L = spec.L
    n_sites = L * L
    nbrs = lattice_neighbours(L)
    x = 2.0 * (torch.rand(chains, n_sites, generator=rng, dtype=DTYPE) < 0.5) - 1.0
    kept = []
    for step in range(steps):
        u = torch.rand(chains, n_sites, generator=rng, dtype=DTYPE)
        for i in range(n_sites):
            field = x[:, nbrs[i]].sum(dim=-1)
            p_up = torch.sigmoid(2.0 * spec.beta * (spec.J * field - spec.mu))
            x[:, i] = torch.where(u[:, i] < p_up, 1.0, -1.0)
        if _keep(step, burn_in, thin):
            kept.append(x.clone())
    if not kept:
        return torch.zeros(0, L, L, dtype=torch.long)
    samples = torch.stack(kept, dim=1).reshape(-1, L, L)
    return samples.long()


def gibbs_gbrbm(
    spec: GBRBMSpec,
    chains: int = 100,
    steps: int = 1000,
    rng: Optional[torch.Generator] = None,
    burn_in: int = 0,
    thin: int = 1,
) -> MixedState:
    """Blocked Gibbs: x2_j | x1 ~ Bernoulli(logistic(b_j + (x1ᵀW)_j / Σ)),
    x1 | x2 ~ N(a + W x2 / 2, (Σ / 2) I).

    Returns:
        MixedState: hidden bits as tokens, visible units as coordinates
    """
    a = torch.tensor(spec.a, dtype=DTYPE)
    b = torch.tensor(spec.b, dtype=DTYPE)
    W = torch.tensor(spec.W, dtype=DTYPE)
    x1 = a.expand(chains, -1).clone()
    std = math.sqrt(spec.sigma / 2)
    kept_x1, kept_x2 = [], []
    for step in range(steps):
        logits = b + (x1 @ W) / spec.sigma
        x2 = (torch.rand(logits.shape, generator=rng, dtype=DTYPE) < torch.sigmoid(logits)).to(DTYPE)
        mean = a + 0.5 * x2 @ W.T
        x1 = mean + std * torch.randn(mean.shape, generator=rng, dtype=DTYPE)
        if _keep(step, burn_in, thin):
            kept_x1.append(x1)
            kept_x2.append(x2)
    if not kept_x1:
        return MixedState.empty((0,), len(spec.b), len(spec.a))
    return MixedState(
        disc=torch.stack(kept_x2, dim=1).reshape(-1, len(spec.b)).long(),
        cont=torch.stack(kept_x1, dim=1).reshape(-1, len(spec.a)),
    )


def mwg_joint(
    target: Target,
    chains: int = 100,
    steps: int = 1000,
    proposal_std: float = 0.5,
    rng: Optional[torch.Generator] = None,
    burn_in: int = 0,
    thin: int = 1,
) -> MixedState:
    """Metropolis-within-Gibbs for mixed targets.

    Each sweep resamples every token exactly from its two-point conditional and
    then updates every continuous coordinate with a Gaussian random-walk proposal
    accepted with probability min(1, exp(−ΔE)).
    """
    if not isinstance(target, (JointDW4Target, JointMoGTarget)):
        raise UnsupportedTaskError(f"mwg_joint does not support task {target.name}")
    V = target.vocab_size
    state = MixedState(
        disc=torch.randint(0, V, (chains, target.d_disc), generator=rng),
        cont=torch.randn(chains, target.d_cont, generator=rng, dtype=DTYPE),
    )
    energy = target(state)
    kept = []
    accepted = 0
    for step in range(steps):
        for i in range(target.d_disc):
            candidates = []
            for v in range(V):
                disc = state.disc.clone()
                disc[:, i] = v
                candidates.append(target(MixedState(disc=disc, cont=state.cont)))
            log_p = -torch.stack(candidates, dim=-1)
            choice = torch.multinomial(torch.softmax(log_p, dim=-1), 1, generator=rng).squeeze(-1)
            state.disc[:, i] = choice
        energy = target(state)
        for j in range(target.d_cont):
            cont = state.cont.clone()
            cont[:, j] += proposal_std * torch.randn(chains, generator=rng, dtype=DTYPE)
            proposal = MixedState(disc=state.disc, cont=cont)
            new_energy = target(proposal)
            log_u = torch.log(torch.rand(chains, generator=rng, dtype=DTYPE))
            accept = log_u < -(new_energy - energy)
            state = MixedState(
                disc=state.disc, cont=torch.where(accept.unsqueeze(-1), cont, state.cont)
            )
            energy = torch.where(accept, new_energy, energy)
            accepted += int(accept.sum())
        if _keep(step, burn_in, thin):
            kept.append(state.clone())
    total = steps * chains * target.d_cont
    if total:
        logger.info(f"MwG acceptance rate {accepted / total:.3f}")
    if not kept:
        return MixedState.empty((0,), target.d_disc, target.d_cont)
    return MixedState.cat([s.unsqueeze(1) for s in kept], dim=1).reshape(-1)


def ground_truth(
    target: Target,
    n: int,
    rng: torch.Generator,
    chains: Optional[int] = None,
    burn_in: Optional[int] = None,
    thin: Optional[int] = None,
) -> MixedState:
    """Reference samples: exact for JointMoG, long thinned MCMC runs otherwise.

    Chain count, burn-in and thinning default to the per-task recipe; each chain
    contributes ceil(n / chains) kept states and the first ``n`` are returned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(target, JointMoGTarget):
        return exact_sample_jointmog(n, target.spec, rng)
    default = GROUND_TRUTH_RECIPES[target.name]
    chains = chains or default[0]
    burn_in = default[1] if burn_in is None else burn_in
    thin = thin or default[2]
    per_chain = math.ceil(n / chains)
    steps = burn_in + per_chain * thin
    logger.info(
        f"Generating {n} {target.name} reference samples: {chains} chains, "
        f"{burn_in} burn-in, thin {thin}"
    )
    if isinstance(target, IsingTarget):
        spins = gibbs_ising(target.spec, chains, steps, rng, burn_in, thin)
        tokens = ((spins.reshape(len(spins), -1) + 1) // 2).long()
        states = MixedState(disc=tokens, cont=torch.zeros(len(tokens), 0, dtype=DTYPE))
    elif isinstance(target, GBRBMTarget):
        states = gibbs_gbrbm(target.spec, chains, steps, rng, burn_in, thin)
    else:
        states = mwg_joint(target, chains, steps, rng=rng, burn_in=burn_in, thin=thin)
    return states[:n]
