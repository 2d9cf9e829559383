"""Tests for the target energy oracles."""

import math

import pytest
import torch

from egm.core.energy import (
    build_target,
    exact_sample_jointmog,
    gbrbm_energy,
    ising_determined_edge_energy,
    ising_energy,
    jointdw4_energy,
    jointmog_energy,
    lattice_edges,
)
from egm.core.exceptions import InvalidStateError
from egm.core.types import (
    DTYPE,
    GBRBMSpec,
    IsingSpec,
    JointDW4Spec,
    JointMoGSpec,
    MixedState,
)


def checkerboard(L: int) -> torch.Tensor:
    i, j = torch.meshgrid(torch.arange(L), torch.arange(L), indexing="ij")
    return torch.where((i + j) % 2 == 0, 1, -1)


def test_ising_all_up():
    spins = torch.ones(5, 5, dtype=torch.long)
    assert ising_energy(spins, IsingSpec(L=5, beta=0.2)).item() == pytest.approx(-10.0)


def test_ising_checkerboard():
    spec = IsingSpec(L=4, beta=0.2)
    assert ising_energy(checkerboard(4), spec).item() == pytest.approx(6.4)


def test_ising_global_flip(rng):
    spec = IsingSpec(L=5, beta=0.4)
    spins = 2 * torch.randint(0, 2, (10, 5, 5), generator=rng) - 1
    assert torch.allclose(ising_energy(spins, spec), ising_energy(-spins, spec))


def test_ising_rejects_bad_spins():
    with pytest.raises(InvalidStateError):
        ising_energy(torch.zeros(3, 3), IsingSpec(L=3))
    with pytest.raises(InvalidStateError):
        ising_energy(torch.ones(4, 4), IsingSpec(L=3))


def test_determined_edges():
    spec = IsingSpec(L=5, beta=0.4)
    masked = torch.full((25,), 2)
    assert ising_determined_edge_energy(masked, spec).item() == 0.0

    tokens = masked.clone()
    tokens[0] = 1
    tokens[1] = 1
    assert ising_determined_edge_energy(tokens, spec).item() == pytest.approx(-0.4)

    full = (checkerboard(5).reshape(-1) + 1) // 2
    expected = ising_energy(2 * full.reshape(5, 5) - 1, spec)
    assert ising_determined_edge_energy(full, spec).item() == pytest.approx(expected.item())


def test_determined_edges_monotone(rng):
    """Unmasking tokens only adds the newly determined edges."""
    spec = IsingSpec(L=3, beta=0.3)
    tokens = torch.randint(0, 2, (9,), generator=rng)
    partial = tokens.clone()
    partial[[0, 1, 3]] = 2
    more = tokens.clone()
    more[0] = 2

    spins = (2 * tokens - 1).to(DTYPE)
    edges = lattice_edges(3)
    known_partial = (partial[edges] != 2).all(dim=-1)
    known_more = (more[edges] != 2).all(dim=-1)
    new = known_more & ~known_partial
    added = -spec.beta * (spins[edges[new, 0]] * spins[edges[new, 1]]).sum()

    delta = ising_determined_edge_energy(more, spec) - ising_determined_edge_energy(partial, spec)
    assert torch.isclose(delta, added)


def test_gbrbm_energy():
    spec = GBRBMSpec()
    x1 = torch.zeros(2, dtype=DTYPE)
    assert gbrbm_energy(x1, torch.zeros(3), spec).item() == pytest.approx(0.0)
    assert gbrbm_energy(x1, torch.tensor([1, 0, 0]), spec).item() == pytest.approx(5.0)
    with pytest.raises(InvalidStateError):
        gbrbm_energy(x1, torch.tensor([2, 0, 0]), spec)


def test_gbrbm_gaussian_conditional_matches_energy(rng):
    """exp(−E) = exp(log_mass) N(x1; mean, var) for every hidden configuration."""
    target = build_target(GBRBMSpec())
    disc = torch.cartesian_prod(*[torch.tensor([0, 1])] * 3)
    x1 = torch.randn(len(disc), 2, generator=rng, dtype=DTYPE)
    log_mass, mean, var = target.gaussian_conditional(disc)
    log_normal = -0.5 * (((x1 - mean) ** 2).sum(-1) / var + 2 * torch.log(2 * math.pi * var))
    energy = target(MixedState(disc=disc, cont=x1))
    assert torch.allclose(log_mass + log_normal, -energy, atol=1e-9)


def test_jointdw4_square():
    spec = JointDW4Spec()
    square = torch.tensor([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]], dtype=DTYPE)
    types = torch.ones(4, dtype=torch.long)
    assert jointdw4_energy(square, types, spec).item() == pytest.approx(-1.6821, abs=1e-4)


def test_jointdw4_invariances(rng):
    spec = JointDW4Spec()
    positions = torch.randn(4, 2, generator=rng, dtype=DTYPE)
    types = torch.tensor([1, 2, 1, 2])
    energy = jointdw4_energy(positions, types, spec)
    shifted = jointdw4_energy(positions + torch.tensor([3.0, -1.5], dtype=DTYPE), types, spec)
    perm = torch.tensor([2, 3, 0, 1])
    permuted = jointdw4_energy(positions[perm], types[perm], spec)
    assert torch.isclose(energy, shifted)
    assert torch.isclose(energy, permuted)


def test_jointmog_energy():
    spec = JointMoGSpec(d=1)
    bits = torch.tensor([-1.0])
    assert jointmog_energy(bits, bits, spec).item() == 0.0
    x = torch.tensor([0.3], dtype=DTYPE)
    assert jointmog_energy(x, bits, spec).item() == pytest.approx(9.3889, abs=1e-4)
    assert jointmog_energy(-x, -bits, spec).item() == pytest.approx(9.3889, abs=1e-4)
    with pytest.raises(InvalidStateError):
        jointmog_energy(torch.zeros(2), bits, spec)


def test_exact_sample_jointmog(rng):
    spec = JointMoGSpec(d=3)
    states = exact_sample_jointmog(100_000, spec, rng)
    bits = (2 * states.disc - 1).to(DTYPE)
    assert (states.cont * bits).mean().item() == pytest.approx(1.0, abs=0.01)
    assert states.disc.to(DTYPE).mean().item() == pytest.approx(0.5, abs=0.01)
    target = build_target(spec)
    # E is a sum of d squared standard normals over 2
    assert target(states).mean().item() == pytest.approx(spec.d / 2, abs=0.05)


def test_target_rejects_masked_state():
    target = build_target(IsingSpec(L=2))
    state = MixedState(disc=torch.tensor([0, 1, 2, 1]), cont=torch.zeros(0, dtype=DTYPE))
    with pytest.raises(InvalidStateError):
        target(state)


def test_target_layouts():
    assert (build_target(IsingSpec(L=3)).d_disc, build_target(IsingSpec(L=3)).d_cont) == (9, 0)
    gbrbm = build_target(GBRBMSpec())
    assert (gbrbm.d_disc, gbrbm.d_cont) == (3, 2)
    dw4 = build_target(JointDW4Spec())
    assert (dw4.d_disc, dw4.d_cont) == (4, 8)
    mog = build_target(JointMoGSpec(d=10))
    assert (mog.d_disc, mog.d_cont, mog.mask_id) == (10, 10, 2)
