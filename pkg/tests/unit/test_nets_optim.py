"""Tests for the sampler / energy networks and the optimizer stack."""

import math

import pytest
import torch
from torch import nn

from egm.config import NetConfig
from egm.core.exceptions import InvalidStateError
from egm.core.paths import MaskedPath
from egm.core.types import DTYPE, MixedState
from egm.models.nets import (
    EnergyNet,
    SamplerNet,
    backward,
    denoiser_to_rates,
    flat_grad,
    init_weights,
    time_embed,
)
from egm.models.optim import NetworkParams, adamw_step, cosine_lr, ema_update

MASK = 2


def mixed_batch(rng, n=5, d_disc=3, d_cont=2):
    disc = torch.randint(0, 3, (n, d_disc), generator=rng)
    return MixedState(disc=disc, cont=torch.randn(n, d_cont, generator=rng, dtype=DTYPE))


def test_time_embed():
    emb = time_embed(torch.tensor(0.0), 16)
    assert torch.all(emb[:8] == 0)
    assert torch.all(emb[8:] == 1)
    assert torch.linalg.vector_norm(emb).item() == pytest.approx(math.sqrt(8))
    assert not torch.allclose(time_embed(0.1, 16), time_embed(0.2, 16))
    assert time_embed(torch.rand(4, 3), 6).shape == (4, 3, 6)
    with pytest.raises(ValueError):
        time_embed(0.5, 7)


def test_sampler_starts_uniform(rng, tiny_net):
    net = SamplerNet(3, 2, 2, tiny_net, rng=rng)
    probs, drift = net(mixed_batch(rng), 0.3)
    assert probs.shape == (5, 3, 2)
    assert torch.allclose(probs, torch.full_like(probs, 0.5))
    assert torch.all(drift == 0)


def test_sampler_deterministic_rows(rng, tiny_net):
    net = SamplerNet(3, 2, 2, tiny_net, rng=rng)
    init_weights(net, rng)
    one = mixed_batch(rng, n=1)
    batch = one.expand(4)
    probs, drift = net(batch, torch.full((4,), 0.7, dtype=DTYPE))
    assert torch.allclose(probs, probs[:1].expand_as(probs))
    assert torch.allclose(drift, drift[:1].expand_as(drift))
    assert torch.allclose(probs.sum(dim=-1), torch.ones(4, 3, dtype=DTYPE))


def test_sampler_rejects_bad_layout(rng, tiny_net):
    net = SamplerNet(3, 2, 2, tiny_net, rng=rng)
    with pytest.raises(InvalidStateError):
        net(mixed_batch(rng, d_disc=4), 0.5)
    bad = mixed_batch(rng)
    bad.disc[0, 0] = 7
    with pytest.raises(InvalidStateError):
        net(bad, 0.5)


def test_single_modality_networks(rng, tiny_net):
    ising = SamplerNet(4, 0, 2, tiny_net, rng=rng)
    probs, drift = ising(mixed_batch(rng, d_disc=4, d_cont=0), 0.5)
    assert drift.shape == (5, 0)
    flow = EnergyNet(0, 3, 2, tiny_net, rng=rng)
    assert flow(mixed_batch(rng, d_disc=0, d_cont=3), 0.5).shape == (5,)


def test_denoiser_to_rates():
    path = MaskedPath(2)
    x_t = MixedState(disc=torch.tensor([[MASK, 1]]), cont=torch.zeros(1, 0, dtype=DTYPE))
    uniform = torch.full((1, 2, 2), 0.5, dtype=DTYPE)
    rates = denoiser_to_rates(uniform, x_t, path, 0.5)
    assert rates[0, 0].tolist() == [1.0, 1.0]
    assert rates[0, 1].tolist() == [0.0, 0.0]
    one_hot = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=DTYPE)
    assert denoiser_to_rates(one_hot, x_t, path, 0.5)[0, 0].tolist() == [0.0, 2.0]


def test_forward_looking_correction(rng, tiny_net):
    states = mixed_batch(rng, d_disc=3, d_cont=0)
    net = EnergyNet(
        3, 0, 2, tiny_net, rng=rng, correction=lambda disc: disc.sum(dim=-1).to(DTYPE)
    )
    assert net.forward_looking
    # zero head: the output is the correction alone
    assert torch.allclose(net(states, 0.2), states.disc.sum(dim=-1).to(DTYPE))
    assert net.descriptor()["forward_looking"] is True


@pytest.mark.parametrize(
    "net_config",
    [
        NetConfig(hidden_dim=8, num_layers=3, time_embed_dim=4, cont_embed_dim=4),
        NetConfig(hidden_dim=8, num_layers=2, residual=True, time_embed_dim=4, cont_embed_dim=4),
    ],
)
def test_gradcheck(net_config, rng):
    """Reverse-mode gradients agree with central differences."""
    net = EnergyNet(3, 2, 2, net_config, rng=rng)
    init_weights(net, rng)
    states = mixed_batch(rng)
    t = torch.rand(5, generator=rng, dtype=DTYPE)

    def loss_fn():
        return (net(states, t) ** 2).mean()

    net.zero_grad()
    grad = backward(net, loss_fn())
    theta = nn.utils.parameters_to_vector(net.parameters()).detach().clone()
    coords = torch.randperm(len(theta), generator=rng)[:40]
    h = 1e-5
    for i in coords.tolist():
        with torch.no_grad():
            bumped = theta.clone()
            bumped[i] += h
            nn.utils.vector_to_parameters(bumped, net.parameters())
            up = loss_fn().item()
            bumped[i] -= 2 * h
            nn.utils.vector_to_parameters(bumped, net.parameters())
            down = loss_fn().item()
        fd = (up - down) / (2 * h)
        assert abs(fd - grad[i].item()) <= 1e-4 * max(1.0, abs(fd))
    with torch.no_grad():
        nn.utils.vector_to_parameters(theta, net.parameters())


def test_backward_linearity_and_constant(rng, tiny_net):
    net = EnergyNet(3, 2, 2, tiny_net, rng=rng)
    init_weights(net, rng)
    states = mixed_batch(rng)

    net.zero_grad()
    g1 = backward(net, net(states, 0.3).sum())
    net.zero_grad()
    g2 = backward(net, (net(states, 0.6) ** 2).sum())
    net.zero_grad()
    g = backward(net, 2 * net(states, 0.3).sum() - 3 * (net(states, 0.6) ** 2).sum())
    assert torch.allclose(g, 2 * g1 - 3 * g2, atol=1e-10)

    net.zero_grad()
    zero = backward(net, 0.0 * net(states, 0.3).sum())
    assert torch.all(zero == 0)
    with pytest.raises(RuntimeError):
        backward(net, torch.tensor(1.0, dtype=DTYPE))


def test_cosine_lr():
    assert cosine_lr(0, 100) == pytest.approx(1e-3)
    assert cosine_lr(100, 100) == pytest.approx(1e-5)
    assert cosine_lr(50, 100) == pytest.approx(5.05e-4)
    with pytest.raises(ValueError):
        cosine_lr(101, 100)


def test_scheduler_follows_cosine():
    weight = nn.Parameter(torch.zeros(2, dtype=DTYPE))
    module = nn.Module()
    module.weight = weight
    params = NetworkParams(module, lr=1e-3, lr_min=1e-5, total_steps=10)
    for step in range(10):
        assert params.current_lr == pytest.approx(cosine_lr(step, 10))
        module.weight.grad = torch.ones(2, dtype=DTYPE)
        assert adamw_step(params)
    assert params.current_lr == pytest.approx(1e-5)
    assert params.step == 10


def test_ema_update():
    shadow = [torch.tensor([1.0, 2.0])]
    ema_update(shadow, [torch.tensor([3.0, 6.0])], 0.0)
    assert shadow[0].tolist() == [3.0, 6.0]
    ema_update(shadow, [torch.tensor([0.0, 0.0])], 1.0)
    assert shadow[0].tolist() == [3.0, 6.0]
    gap = 3.0
    for _ in range(5):
        ema_update(shadow, [torch.tensor([0.0, 0.0])], 0.5)
        gap *= 0.5
        assert shadow[0][0].item() == pytest.approx(gap)
    with pytest.raises(ValueError):
        ema_update(shadow, [], 0.5)


def _toy(values):
    module = nn.Module()
    module.weight = nn.Parameter(torch.tensor(values, dtype=DTYPE))
    return module


def test_adamw_first_step_is_signed_lr():
    module = _toy([1.0, -2.0])
    params = NetworkParams(module, lr=1e-3, total_steps=100)
    module.weight.grad = torch.tensor([0.3, -5.0], dtype=DTYPE)
    assert adamw_step(params)
    assert module.weight.detach().tolist() == pytest.approx([1.0 - 1e-3, -2.0 + 1e-3], abs=1e-9)


def test_adamw_two_steps_by_hand():
    module = _toy([0.5, -0.5])
    params = NetworkParams(module, lr=1e-2, lr_min=1e-2, total_steps=10, weight_decay=0.1)
    grads = [[0.2, -0.1], [-0.4, 0.3]]
    theta = [0.5, -0.5]
    m = [0.0, 0.0]
    v = [0.0, 0.0]
    for step, g in enumerate(grads, start=1):
        module.weight.grad = torch.tensor(g, dtype=DTYPE)
        adamw_step(params)
        for i in range(2):
            theta[i] *= 1 - 1e-2 * 0.1
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            m_hat = m[i] / (1 - 0.9**step)
            v_hat = v[i] / (1 - 0.999**step)
            theta[i] -= 1e-2 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert module.weight.detach().tolist() == pytest.approx(theta, abs=1e-12)


def test_adamw_zero_gradient_is_noop():
    module = _toy([1.0, 2.0])
    params = NetworkParams(module, total_steps=5)
    module.weight.grad = torch.zeros(2, dtype=DTYPE)
    adamw_step(params)
    assert module.weight.detach().tolist() == [1.0, 2.0]


def test_adamw_skips_non_finite():
    module = _toy([1.0, 2.0])
    params = NetworkParams(module, total_steps=5)
    module.weight.grad = torch.tensor([math.nan, 1.0], dtype=DTYPE)
    assert not adamw_step(params)
    assert params.skipped == 1
    assert params.step == 0
    assert module.weight.detach().tolist() == [1.0, 2.0]


def test_network_params_round_trip(rng, tiny_net):
    net = EnergyNet(3, 2, 2, tiny_net, rng=rng)
    params = NetworkParams(net, total_steps=10, ema_decay=0.9)
    states = mixed_batch(rng)
    for _ in range(3):
        backward(net, (net(states, 0.5) - 1.0).pow(2).mean())
        adamw_step(params)
        params.update_ema()

    clone = EnergyNet(3, 2, 2, tiny_net, rng=torch.Generator().manual_seed(99))
    restored = NetworkParams(clone, total_steps=10, ema_decay=0.9)
    restored.load(params.arrays(), params.counters())
    assert torch.equal(restored.flat(), params.flat())
    assert restored.step == 3
    assert restored.current_lr == pytest.approx(params.current_lr)
    assert torch.allclose(restored.ema_net()(states, 0.5), params.ema_net()(states, 0.5))
    assert torch.equal(flat_grad(clone), torch.zeros_like(restored.flat()))
