"""Sampler and intermediate-energy networks on mixed states."""

import logging
import math
from typing import Callable, Dict, List, Optional, Tuple, Union

import torch
from torch import nn

from ..config import NetConfig
from ..core.exceptions import InvalidStateError
from ..core.paths import MaskedPath, as_time
from ..core.types import DTYPE, MixedState

logger = logging.getLogger(__name__)

Time = Union[float, torch.Tensor]


def time_embed(t: Time, dim: int, base: float = 1e4) -> torch.Tensor:
    """Sinusoidal embedding [sin(ω_k t), cos(ω_k t)] with ω_k = base^(−2k/dim).

    Args:
        t: Times of any shape
        dim: Even embedding size

    Returns:
        torch.Tensor: ``(*t.shape, dim)``
    """
    if dim % 2:
        raise ValueError(f"time embedding size must be even, got {dim}")
    t = torch.as_tensor(t, dtype=DTYPE)
    k = torch.arange(dim // 2, dtype=DTYPE)
    freqs = base ** (-2.0 * k / dim)
    angles = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def init_weights(module: nn.Module, rng: torch.Generator):
    """Uniform fan-in init for linear layers, N(0, 1) for embeddings."""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=rng)
                layer.bias.uniform_(-bound, bound, generator=rng)
        elif isinstance(layer, nn.Embedding):
            with torch.no_grad():
                layer.weight.normal_(generator=rng)


def _zero(layer: nn.Linear) -> nn.Linear:
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class ResidualBlock(nn.Module):
    def __init__(self, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(hidden_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, hidden_dim)
        self.act = nn.GELU()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.fc2(self.act(self.fc1(h)))


class MixedEncoder(nn.Module):
    """Concatenates token embeddings, a continuous lift and the time embedding."""

    def __init__(self, d_disc: int, d_cont: int, vocab_size: int, config: NetConfig):
        super().__init__()
        self.d_disc = d_disc
        self.d_cont = d_cont
        self.vocab_size = vocab_size
        self.time_dim = config.time_embed_dim
        self.tokens = nn.Embedding(vocab_size + 1, config.token_embed_dim) if d_disc else None
        self.lift = nn.Linear(d_cont, config.cont_embed_dim) if d_cont else None
        self.out_dim = (
            d_disc * config.token_embed_dim
            + (config.cont_embed_dim if d_cont else 0)
            + config.time_embed_dim
        )

    def forward(self, state: MixedState, t: torch.Tensor) -> torch.Tensor:
        """Encode a flat ``(n,)`` batch."""
        parts = []
        if self.tokens is not None:
            parts.append(self.tokens(state.disc).flatten(start_dim=-2))
        if self.lift is not None:
            parts.append(self.lift(state.cont))
        parts.append(time_embed(t, self.time_dim))
        return torch.cat(parts, dim=-1)


def build_trunk(in_dim: int, config: NetConfig) -> nn.Sequential:
    """Plain GELU MLP, or input projection followed by residual blocks."""
    h = config.hidden_dim
    if config.residual:
        blocks: List[nn.Module] = [nn.Linear(in_dim, h)]
        blocks += [ResidualBlock(h) for _ in range(config.num_layers)]
        blocks.append(nn.GELU())
        return nn.Sequential(*blocks)
    layers: List[nn.Module] = []
    dims = [in_dim] + [h] * config.num_layers
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers += [nn.Linear(d_in, d_out), nn.GELU()]
    return nn.Sequential(*layers)


class _MixedNet(nn.Module):
    def __init__(self, d_disc: int, d_cont: int, vocab_size: int, config: NetConfig):
        super().__init__()
        if d_disc + d_cont < 1:
            raise ValueError("network needs at least one input coordinate")
        self.d_disc = d_disc
        self.d_cont = d_cont
        self.vocab_size = vocab_size
        self.config = config
        self.encoder = MixedEncoder(d_disc, d_cont, vocab_size, config)
        self.trunk = build_trunk(self.encoder.out_dim, config)

    def descriptor(self) -> Dict:
        """Architecture record stored next to checkpointed parameters."""
        return {
            "kind": type(self).__name__,
            "d_disc": self.d_disc,
            "d_cont": self.d_cont,
            "vocab_size": self.vocab_size,
            "net": self.config.model_dump(),
        }

    def _features(self, state: MixedState, t: Time) -> Tuple[torch.Tensor, torch.Size]:
        if state.d_disc != self.d_disc or state.d_cont != self.d_cont:
            raise InvalidStateError(
                f"Network expects ({self.d_disc}, {self.d_cont}) coordinates, "
                f"got ({state.d_disc}, {state.d_cont})"
            )
        if self.d_disc and torch.any((state.disc < 0) | (state.disc > self.vocab_size)):
            raise InvalidStateError("token id outside vocabulary")
        batch_shape = state.batch_shape
        t = as_time(t, batch_shape).reshape(-1)
        return self.trunk(self.encoder(state.flatten(), t)), batch_shape


class SamplerNet(_MixedNet):
    """Probability denoiser over data tokens plus a drift head."""

    def __init__(
        self,
        d_disc: int,
        d_cont: int,
        vocab_size: int,
        config: NetConfig,
        rng: Optional[torch.Generator] = None,
    ):
        super().__init__(d_disc, d_cont, vocab_size, config)
        h = config.hidden_dim
        self.logits_head = nn.Linear(h, d_disc * vocab_size) if d_disc else None
        self.drift_head = nn.Linear(h, d_cont) if d_cont else None
        self.to(DTYPE)
        if rng is not None:
            init_weights(self, rng)
        for head in (self.logits_head, self.drift_head):
            if head is not None:
                _zero(head)

    def forward(self, state: MixedState, t: Time) -> Tuple[torch.Tensor, torch.Tensor]:
        """Denoiser probabilities ``(*batch, D_disc, V)`` and drift ``(*batch, D_cont)``."""
        h, batch_shape = self._features(state, t)
        n = h.shape[0]
        if self.logits_head is not None:
            logits = self.logits_head(h).reshape(n, self.d_disc, self.vocab_size)
            probs = torch.softmax(logits, dim=-1)
        else:
            probs = torch.zeros(n, 0, self.vocab_size, dtype=DTYPE)
        if self.drift_head is not None:
            drift = self.drift_head(h)
        else:
            drift = torch.zeros(n, 0, dtype=DTYPE)
        return (
            probs.reshape(*batch_shape, self.d_disc, self.vocab_size),
            drift.reshape(*batch_shape, self.d_cont),
        )


class EnergyNet(_MixedNet):
    """Scalar intermediate energy E_t(x), optionally with a known partial energy added.

    ``correction`` maps token ids ``(n, D_disc)`` to energies ``(n,)`` of the
    factors already determined by the unmasked tokens.
    """

    def __init__(
        self,
        d_disc: int,
        d_cont: int,
        vocab_size: int,
        config: NetConfig,
        rng: Optional[torch.Generator] = None,
        correction: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    ):
        super().__init__(d_disc, d_cont, vocab_size, config)
        self.head = nn.Linear(config.hidden_dim, 1)
        self.correction = correction
        self.to(DTYPE)
        if rng is not None:
            init_weights(self, rng)
        _zero(self.head)

    @property
    def forward_looking(self) -> bool:
        return self.correction is not None

    def descriptor(self) -> Dict:
        return {**super().descriptor(), "forward_looking": self.forward_looking}

    def forward(self, state: MixedState, t: Time) -> torch.Tensor:
        h, batch_shape = self._features(state, t)
        energy = self.head(h).squeeze(-1)
        if self.correction is not None:
            energy = energy + self.correction(state.flatten().disc)
        return energy.reshape(batch_shape)


def denoiser_to_rates(
    probs: torch.Tensor, x_t: MixedState, path: MaskedPath, t: Time
) -> torch.Tensor:
    """Rate table κ̇_t/(1 − κ_t) · p_{1|t}(y|x) at masked positions, zero elsewhere.

    Raises:
        SingularityError: If t = 1
    """
    t = as_time(t, x_t.batch_shape)
    masked = (x_t.disc == path.mask_id).unsqueeze(-1)
    return path.rate_scale(t)[..., None, None] * probs * masked


def backward(net: nn.Module, loss: torch.Tensor) -> torch.Tensor:
    """Reverse-mode gradients of a scalar loss into ``.grad``.

    Returns:
        torch.Tensor: Flat gradient buffer, zero for unused parameters

    Raises:
        RuntimeError: If ``loss`` was not produced by a forward pass
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if loss.grad_fn is None:
        raise RuntimeError("backward called without a recorded forward pass")
    loss.backward()
    return flat_grad(net)


def flat_grad(net: nn.Module) -> torch.Tensor:
    return torch.cat(
        [
            (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
            for p in net.parameters()
        ]
    )
