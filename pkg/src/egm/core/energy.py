"""Target energy oracles E_1(x) for the benchmark tasks.

Every oracle is a pure function of its inputs. Functions take task-space values
(spins in {-1, 1}, bits in {0, 1}, particle types in {1, 2}) with arbitrary
leading batch axes; the ``Target`` classes wrap them behind the token encoding
used by samplers, where every task has two data tokens and ``MASK = 2``.
"""

import abc
import logging
import math
from typing import Optional, Tuple

import torch

from .exceptions import InvalidStateError
from .types import (
    DTYPE,
    EnergySpec,
    GBRBMSpec,
    IsingSpec,
    JointDW4Spec,
    JointMoGSpec,
    MixedState,
)

logger = logging.getLogger(__name__)


def lattice_edges(L: int) -> torch.Tensor:
    """Periodic nearest-neighbour edges of an L x L lattice in raster order.

    Returns:
        torch.Tensor: ``(2 L^2, 2)`` site index pairs, right then down neighbour
        of every site, each unordered pair listed once (for L=2 the wrap-around
        duplicates are kept, as on any periodic lattice).
    """
    idx = torch.arange(L * L).reshape(L, L)
    right = torch.stack([idx, torch.roll(idx, shifts=-1, dims=1)], dim=-1)
    down = torch.stack([idx, torch.roll(idx, shifts=-1, dims=0)], dim=-1)
    return torch.cat([right.reshape(-1, 2), down.reshape(-1, 2)], dim=0)


def ising_energy(spins: torch.Tensor, spec: IsingSpec) -> torch.Tensor:
    """E = -βJ Σ_<ij> x_i x_j + βμ Σ_i x_i over the periodic lattice.

    Args:
        spins: ``(*batch, L, L)`` grid of ±1 values
        spec: Lattice parameters

    Returns:
        torch.Tensor: Energy per batch element
    """
    if spins.shape[-2:] != (spec.L, spec.L):
        raise InvalidStateError(
            f"Expected a {spec.L}x{spec.L} grid, got {tuple(spins.shape[-2:])}"
        )
    if not torch.all((spins == 1) | (spins == -1)):
        raise InvalidStateError("Ising spins must be ±1")
    x = spins.to(DTYPE).flatten(start_dim=-2)
    edges = lattice_edges(spec.L)
    pair_sum = (x[..., edges[:, 0]] * x[..., edges[:, 1]]).sum(dim=-1)
    return spec.beta * (-spec.J * pair_sum + spec.mu * x.sum(dim=-1))


def ising_determined_edge_energy(
    tokens: torch.Tensor, spec: IsingSpec, mask_id: int = 2
) -> torch.Tensor:
    """Energy of the edges whose endpoints are both unmasked.

    Args:
        tokens: ``(*batch, L*L)`` token ids (0 = spin down, 1 = spin up, MASK)

    Returns:
        torch.Tensor: -βJ Σ_{(i,j) determined} x_i x_j + βμ Σ_{i unmasked} x_i
    """
    known = tokens != mask_id
    x = torch.where(known, 2 * tokens - 1, 0).to(DTYPE)
    edges = lattice_edges(spec.L)
    pair_sum = (x[..., edges[:, 0]] * x[..., edges[:, 1]]).sum(dim=-1)
    return spec.beta * (-spec.J * pair_sum + spec.mu * x.sum(dim=-1))


def gbrbm_energy(x1: torch.Tensor, x2: torch.Tensor, spec: GBRBMSpec) -> torch.Tensor:
    """E = Σ⁻¹‖x1 − a‖² − ⟨b, x2⟩ − Σ⁻¹ x1ᵀ W x2.

    Args:
        x1: ``(*batch, 2)`` visible units
        x2: ``(*batch, 3)`` hidden bits in {0, 1}
    """
    if not torch.all((x2 == 0) | (x2 == 1)):
        raise InvalidStateError("GB-RBM hidden units must be 0/1")
    a = torch.tensor(spec.a, dtype=DTYPE)
    b = torch.tensor(spec.b, dtype=DTYPE)
    W = torch.tensor(spec.W, dtype=DTYPE)
    x1 = x1.to(DTYPE)
    x2 = x2.to(DTYPE)
    quad = ((x1 - a) ** 2).sum(dim=-1) / spec.sigma
    coupling = torch.einsum("...i,ij,...j->...", x1, W, x2) / spec.sigma
    return quad - (x2 * b).sum(dim=-1) - coupling


def jointdw4_energy(
    positions: torch.Tensor, types: torch.Tensor, spec: JointDW4Spec
) -> torch.Tensor:
    """Type-dependent double-well pair energy summed over unordered pairs i<j.

    Args:
        positions: ``(*batch, n, 2)`` particle coordinates
        types: ``(*batch, n)`` particle types in {1, 2}
    """
    if not torch.all((types == 1) | (types == 2)):
        raise InvalidStateError("JointDW4 particle types must be 1 or 2")
    n = spec.n_particles
    i, j = torch.triu_indices(n, n, offset=1)
    diff = positions[..., i, :] - positions[..., j, :]
    dist = torch.linalg.vector_norm(diff.to(DTYPE), dim=-1)
    dev = dist - spec.d0
    ti = types[..., i].long() - 1
    tj = types[..., j].long() - 1
    a = torch.tensor(spec.a, dtype=DTYPE)[ti, tj]
    b = torch.tensor(spec.b, dtype=DTYPE)[ti, tj]
    c = torch.tensor(spec.c, dtype=DTYPE)[ti, tj]
    pair = a * dev + b * dev**2 + c * dev**4
    return pair.sum(dim=-1) / (2.0 * spec.tau)


def jointmog_energy(
    x: torch.Tensor, bits: torch.Tensor, spec: JointMoGSpec
) -> torch.Tensor:
    """E = Σ_i (x_i − b_i)² / (2σ²) with b_i ∈ {−1, 1}."""
    if x.shape[-1] != bits.shape[-1]:
        raise InvalidStateError(
            f"x has {x.shape[-1]} coordinates but bits has {bits.shape[-1]}"
        )
    return ((x.to(DTYPE) - bits.to(DTYPE)) ** 2).sum(dim=-1) / (2.0 * spec.sigma**2)


class Target(abc.ABC):
    """Energy oracle over token-encoded mixed states.

    Data tokens are ``0..vocab_size-1`` and ``mask_id = vocab_size``.
    """

    vocab_size: int = 2
    d_disc: int
    d_cont: int
    # determined_energy is available for partially masked states
    forward_looking: bool = False

    def __init__(self, spec: EnergySpec):
        self.spec = spec

    @property
    def name(self) -> str:
        return self.spec.task

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def __call__(self, state: MixedState) -> torch.Tensor:
        if torch.any(state.disc == self.mask_id):
            raise InvalidStateError(f"{self.name}: energy of a masked state")
        return self._energy(state)

    @abc.abstractmethod
    def _energy(self, state: MixedState) -> torch.Tensor:
        """Energy of an unmasked state."""

    @abc.abstractmethod
    def decode_tokens(self, disc: torch.Tensor) -> torch.Tensor:
        """Token ids to task values."""

    def gaussian_conditional(
        self, disc: torch.Tensor
    ) -> Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """exp(−E(cont, disc)) = exp(log_mass) · N(cont; mean, var·I), when it exists.

        Returns:
            Optional: ``(log_mass, mean, var)`` per discrete configuration, or
            None when the continuous conditional is not Gaussian
        """
        return None

    def determined_energy(self, disc: torch.Tensor) -> Optional[torch.Tensor]:
        """Energy of the fully determined factors of a partially masked state."""
        return None


class IsingTarget(Target):
    forward_looking = True

    def __init__(self, spec: IsingSpec):
        super().__init__(spec)
        self.d_disc = spec.L * spec.L
        self.d_cont = 0

    def decode_tokens(self, disc: torch.Tensor) -> torch.Tensor:
        return 2 * disc - 1

    def spins(self, state: MixedState) -> torch.Tensor:
        """±1 grid of shape ``(*batch, L, L)``."""
        L = self.spec.L
        return self.decode_tokens(state.disc).reshape(*state.batch_shape, L, L)

    def _energy(self, state: MixedState) -> torch.Tensor:
        return ising_energy(self.spins(state), self.spec)

    def determined_energy(self, disc: torch.Tensor) -> torch.Tensor:
        return ising_determined_edge_energy(disc, self.spec, self.mask_id)


class GBRBMTarget(Target):
    def __init__(self, spec: GBRBMSpec):
        super().__init__(spec)
        self.d_disc = len(spec.b)
        self.d_cont = len(spec.a)

    def decode_tokens(self, disc: torch.Tensor) -> torch.Tensor:
        return disc

    def _energy(self, state: MixedState) -> torch.Tensor:
        return gbrbm_energy(state.cont, self.decode_tokens(state.disc), self.spec)

    def gaussian_conditional(self, disc: torch.Tensor):
        a = torch.tensor(self.spec.a, dtype=DTYPE)
        b = torch.tensor(self.spec.b, dtype=DTYPE)
        W = torch.tensor(self.spec.W, dtype=DTYPE)
        x2 = self.decode_tokens(disc).to(DTYPE)
        sigma = self.spec.sigma
        mean = a + 0.5 * x2 @ W.T
        log_mass = (
            0.5 * self.d_cont * math.log(math.pi * sigma)
            + ((mean**2).sum(dim=-1) - (a**2).sum()) / sigma
            + (x2 * b).sum(dim=-1)
        )
        var = torch.full_like(log_mass, 0.5 * sigma)
        return log_mass, mean, var


class JointDW4Target(Target):
    def __init__(self, spec: JointDW4Spec):
        super().__init__(spec)
        self.d_disc = spec.n_particles
        self.d_cont = 2 * spec.n_particles

    def decode_tokens(self, disc: torch.Tensor) -> torch.Tensor:
        return disc + 1

    def _energy(self, state: MixedState) -> torch.Tensor:
        positions = state.cont.reshape(*state.batch_shape, self.spec.n_particles, 2)
        return jointdw4_energy(positions, self.decode_tokens(state.disc), self.spec)


class JointMoGTarget(Target):
    def __init__(self, spec: JointMoGSpec):
        super().__init__(spec)
        self.d_disc = spec.d
        self.d_cont = spec.d

    def decode_tokens(self, disc: torch.Tensor) -> torch.Tensor:
        return 2 * disc - 1

    def _energy(self, state: MixedState) -> torch.Tensor:
        return jointmog_energy(state.cont, self.decode_tokens(state.disc), self.spec)

    def gaussian_conditional(self, disc: torch.Tensor):
        mean = self.decode_tokens(disc).to(DTYPE)
        var2 = self.spec.sigma**2
        log_mass = torch.full(
            disc.shape[:-1], 0.5 * self.d_cont * math.log(2 * math.pi * var2), dtype=DTYPE
        )
        return log_mass, mean, torch.full_like(log_mass, var2)


def exact_sample_jointmog(
    n: int, spec: JointMoGSpec, rng: torch.Generator
) -> MixedState:
    """Exact JointMoG draws: uniform bits, then x_i ~ N(b_i, σ²).

    Returns:
        MixedState: ``n`` token-encoded states (token 1 = +1)
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = torch.randint(0, 2, (n, spec.d), generator=rng)
    bits = (2 * tokens - 1).to(DTYPE)
    x = bits + spec.sigma * torch.randn(n, spec.d, generator=rng, dtype=DTYPE)
    return MixedState(disc=tokens, cont=x)


_TARGETS = {
    "ising": IsingTarget,
    "gbrbm": GBRBMTarget,
    "jointdw4": JointDW4Target,
    "jointmog": JointMoGTarget,
}


def build_target(spec: EnergySpec) -> Target:
    """Instantiate the oracle for a task spec."""
    return _TARGETS[spec.task](spec)
