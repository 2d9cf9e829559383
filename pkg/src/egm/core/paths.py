"""Conditional probability paths and their bootstrap kernels.

Three single-modality paths are provided, each acting on one tensor with
trailing coordinate axis:

* ``MaskedPath``  p_{t|1} = κ_t δ_{x1} + (1 − κ_t) δ_MASK per token,
* ``CondOTPath``  p_{t|1} = N(t x1, (1 − t)² I),
* ``VEPath``      p_{t|1} = N(x1, σ_t² I), σ_t = σ_max (σ_min / σ_max)^t.

``PathBundle`` is their coordinate-factorized product on mixed states. Times
are floats or tensors broadcastable to the batch shape of the state.
t = 0 is the prior and t = 1 the target.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
from torch.distributions import Normal

from .exceptions import SingularityError
from .types import DTYPE, GeneratorEstimate, MixedState

logger = logging.getLogger(__name__)

Time = Union[float, torch.Tensor]

# 1 − t (or 1 − κ_t) never drops below this inside a generator
GENERATOR_CLAMP = 1e-4


def as_time(t: Time, batch_shape: Sequence[int]) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError(f"time outside [0, 1]: {t}")
    return t.expand(batch_shape) if t.dim() <= len(batch_shape) else t


def _check_order(t: torch.Tensor, r: torch.Tensor):
    if torch.any(t >= r):
        raise ValueError("bootstrap kernels require t < r")


def _gaussian_logpdf(x: torch.Tensor, mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """Sum over the trailing axis of isotropic Gaussian log-densities."""
    if x.shape[-1] == 0:
        return torch.zeros(x.shape[:-1], dtype=DTYPE)
    # a zero variance (CondOT at t = 1) yields a point mass and a nan log q
    dist = Normal(mean, var.sqrt().unsqueeze(-1), validate_args=False)
    return dist.log_prob(x).sum(dim=-1)


class LinearSchedule:
    """κ_t = t."""

    kind = "linear"

    def kappa(self, t: torch.Tensor) -> torch.Tensor:
        return t

    def kappa_dot(self, t: torch.Tensor) -> torch.Tensor:
        return torch.ones_like(t)


@dataclass(frozen=True)
class VESchedule:
    """σ_t = σ_max (σ_min / σ_max)^t, strictly decreasing with σ_1 = σ_min."""

    sigma_min: float = 0.01
    sigma_max: float = 2.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("VE schedule requires 0 < sigma_min < sigma_max")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_min / self.sigma_max)

    def sigma(self, t: torch.Tensor) -> torch.Tensor:
        return self.sigma_max * torch.exp(self.log_ratio * t)

    def sigma_dot(self, t: torch.Tensor) -> torch.Tensor:
        return self.log_ratio * self.sigma(t)


class MaskedPath:
    """Masked diffusion over ``vocab_size`` data tokens plus MASK = vocab_size."""

    def __init__(self, vocab_size: int, schedule: Optional[LinearSchedule] = None):
        self.vocab_size = vocab_size
        self.mask_id = vocab_size
        self.schedule = schedule or LinearSchedule()

    def rate_scale(self, t: torch.Tensor) -> torch.Tensor:
        """κ̇_t / (1 − κ_t) with the denominator clamped away from zero."""
        if torch.any(t >= 1):
            raise SingularityError("masked generator is singular at t = 1")
        kappa = self.schedule.kappa(t)
        return self.schedule.kappa_dot(t) / (1 - kappa).clamp_min(GENERATOR_CLAMP)

    def sample_t_given_1(self, x1, t, rng):
        kappa = self.schedule.kappa(t).unsqueeze(-1)
        keep = torch.rand(x1.shape, generator=rng, dtype=DTYPE) < kappa
        return torch.where(keep, x1, torch.full_like(x1, self.mask_id))

    def log_prob_t_given_1(self, x_t, x1, t):
        shape = torch.broadcast_shapes(x_t.shape, x1.shape)
        kappa = self.schedule.kappa(t).unsqueeze(-1).expand(shape)
        masked = x_t == self.mask_id
        logp = torch.where(
            masked,
            torch.log1p(-kappa),
            torch.where(x_t == x1, torch.log(kappa), torch.full_like(kappa, -math.inf)),
        )
        return logp.sum(dim=-1)

    def _one_hot(self, tokens: torch.Tensor) -> torch.Tensor:
        """One-hot over data tokens; MASK maps to the zero row."""
        return torch.nn.functional.one_hot(tokens, self.vocab_size + 1)[
            ..., : self.vocab_size
        ].to(DTYPE)

    def cond_generator_t1(self, x_t, x1, t):
        scale = self.rate_scale(t)[..., None, None]
        masked = (x_t == self.mask_id).unsqueeze(-1)
        return scale * self._one_hot(x1) * masked

    def proposal_1_given_t(self, x_t, t, K, rng):
        draws_shape = (*x_t.shape[:-1], K, x_t.shape[-1])
        uniform = torch.randint(0, self.vocab_size, draws_shape, generator=rng)
        x = x_t.unsqueeze(-2).expand(draws_shape)
        masked = x == self.mask_id
        x1 = torch.where(masked, uniform, x)
        log_q = -math.log(self.vocab_size) * masked.sum(dim=-1).to(DTYPE)
        return x1, log_q

    def _keep_ratio(self, t, r):
        return self.schedule.kappa(t) / self.schedule.kappa(r)

    def backward_kernel_sample(self, x_r, r, t, rng):
        ratio = self._keep_ratio(t, r).unsqueeze(-1)
        keep = torch.rand(x_r.shape, generator=rng, dtype=DTYPE) < ratio
        return torch.where(keep, x_r, torch.full_like(x_r, self.mask_id))

    def backward_kernel_logpdf(self, x_t, x_r, t, r):
        shape = torch.broadcast_shapes(x_t.shape, x_r.shape)
        ratio = self._keep_ratio(t, r).unsqueeze(-1).expand(shape)
        t_masked = x_t == self.mask_id
        r_masked = x_r == self.mask_id
        neg_inf = torch.full_like(ratio, -math.inf)
        logp = torch.where(
            r_masked,
            torch.where(t_masked, torch.zeros_like(ratio), neg_inf),
            torch.where(
                t_masked,
                torch.log1p(-ratio),
                torch.where(x_t == x_r, torch.log(ratio), neg_inf),
            ),
        )
        return logp.sum(dim=-1)

    def cond_generator_tr(self, x_t, x_r, t, r):
        gap = (self.schedule.kappa(r) - self.schedule.kappa(t)).clamp_min(
            GENERATOR_CLAMP
        )
        scale = (self.schedule.kappa_dot(t) / gap)[..., None, None]
        active = ((x_t == self.mask_id) & (x_r != self.mask_id)).unsqueeze(-1)
        return scale * self._one_hot(x_r) * active

    def proposal_weights(self, t, r) -> torch.Tensor:
        """Unnormalized q_{r|t} category weights at a masked position.

        Returns:
            torch.Tensor: ``(*batch, V + 1)``; each data token gets 1 − κ_t/κ_r,
            MASK gets 1 while κ_r < 1 and 0 once p_r has no mask mass
        """
        ratio = self._keep_ratio(t, r)
        data = (1 - ratio).unsqueeze(-1).expand(*ratio.shape, self.vocab_size)
        mask = (self.schedule.kappa(r) < 1).to(DTYPE).unsqueeze(-1)
        return torch.cat([data, mask], dim=-1)

    def proposal_r_given_t(self, x_t, t, r, K, rng):
        weights = self.proposal_weights(t, r)
        cumulative = weights.cumsum(dim=-1)
        total = cumulative[..., -1:]
        probs = weights / total
        draws_shape = (*x_t.shape[:-1], K, x_t.shape[-1])
        # last entry is exactly 1 so a zero-weight MASK is never drawn
        cdf = (cumulative / total)[..., None, None, :]
        u = torch.rand(draws_shape, generator=rng, dtype=DTYPE).unsqueeze(-1)
        category = (u >= cdf[..., :-1]).sum(dim=-1)
        x = x_t.unsqueeze(-2).expand(draws_shape)
        masked = x == self.mask_id
        x_r = torch.where(masked, category, x)
        log_p = torch.log(probs)[..., None, None, :].expand(*draws_shape, -1)
        chosen = torch.gather(log_p, -1, category.unsqueeze(-1)).squeeze(-1)
        log_q = torch.where(masked, chosen, torch.zeros_like(chosen)).sum(dim=-1)
        return x_r, log_q

    def log_Z_1_given_r(self, x_r, r):
        kappa = self.schedule.kappa(r)
        n_masked = (x_r == self.mask_id).sum(dim=-1).to(DTYPE)
        n_known = x_r.shape[-1] - n_masked
        masked_term = torch.where(
            n_masked > 0,
            n_masked * torch.log(self.vocab_size * (1 - kappa)),
            torch.zeros_like(n_masked),
        )
        return masked_term + n_known * torch.log(kappa)

    def prior(self, batch_shape, dim, rng):
        return torch.full((*batch_shape, dim), self.mask_id, dtype=torch.long)


class CondOTPath:
    """Conditional optimal-transport Gaussian path with α_t = t."""

    kind = "cond_ot"

    @staticmethod
    def bar_var(t, r):
        """σ̄_t = (1 − t)² − (t² / r²)(1 − r)², the variance of p_{t|r}."""
        return (1 - t) ** 2 - (t / r) ** 2 * (1 - r) ** 2

    @staticmethod
    def bar_var_dot(t, r):
        return -2 * (1 - t) - 2 * t * (1 - r) ** 2 / r**2

    def sample_t_given_1(self, x1, t, rng):
        t = t.unsqueeze(-1)
        noise = torch.randn(x1.shape, generator=rng, dtype=DTYPE)
        return t * x1 + (1 - t) * noise

    def log_prob_t_given_1(self, x_t, x1, t):
        if torch.any(t >= 1):
            raise SingularityError("CondOT forward kernel is a point mass at t = 1")
        return _gaussian_logpdf(x_t, t.unsqueeze(-1) * x1, (1 - t) ** 2)

    def cond_generator_t1(self, x_t, x1, t):
        if torch.any(t >= 1):
            raise SingularityError("CondOT velocity is singular at t = 1")
        denom = (1 - t).clamp_min(GENERATOR_CLAMP).unsqueeze(-1)
        return (x1 - x_t) / denom

    def proposal_1_given_t(self, x_t, t, K, rng):
        if torch.any(t <= 0):
            raise SingularityError("CondOT proposal q_{1|t} is singular at t = 0")
        return self._gaussian_draws(x_t / t.unsqueeze(-1), ((1 - t) / t) ** 2, K, rng)

    def _gaussian_draws(self, mean, var, K, rng):
        draws_shape = (*mean.shape[:-1], K, mean.shape[-1])
        mean = mean.unsqueeze(-2).expand(draws_shape)
        var = var.unsqueeze(-1).expand(draws_shape[:-1])
        noise = torch.randn(draws_shape, generator=rng, dtype=DTYPE)
        x = mean + var.sqrt().unsqueeze(-1) * noise
        return x, _gaussian_logpdf(x, mean, var)

    def _checked_bar_var(self, t, r):
        var = self.bar_var(t, r)
        if torch.any(var <= 0):
            raise SingularityError("CondOT bootstrap variance is not positive")
        return var

    def backward_kernel_sample(self, x_r, r, t, rng):
        var = self._checked_bar_var(t, r).unsqueeze(-1)
        noise = torch.randn(x_r.shape, generator=rng, dtype=DTYPE)
        return (t / r).unsqueeze(-1) * x_r + var.sqrt() * noise

    def backward_kernel_logpdf(self, x_t, x_r, t, r):
        var = self._checked_bar_var(t, r)
        return _gaussian_logpdf(x_t, (t / r).unsqueeze(-1) * x_r, var)

    def cond_generator_tr(self, x_t, x_r, t, r):
        var = self._checked_bar_var(t, r)
        coef = (self.bar_var_dot(t, r) / (2 * var)).unsqueeze(-1)
        tr = (t / r).unsqueeze(-1)
        return x_r / r.unsqueeze(-1) + coef * (x_t - tr * x_r)

    def proposal_r_given_t(self, x_t, t, r, K, rng):
        if torch.any(t <= 0):
            raise SingularityError("CondOT proposal q_{r|t} is singular at t = 0")
        var = (r / t) ** 2 * self._checked_bar_var(t, r)
        return self._gaussian_draws((r / t).unsqueeze(-1) * x_t, var, K, rng)

    def log_Z_1_given_r(self, x_r, r):
        return -x_r.shape[-1] * torch.log(r)

    def prior(self, batch_shape, dim, rng):
        return torch.randn(*batch_shape, dim, generator=rng, dtype=DTYPE)

    def marginalize_gaussian(self, mean, var, r):
        """Moments of ∫ p_{r|1}(·|x1) N(x1; mean, var I) dx1."""
        return r.unsqueeze(-1) * mean, r**2 * var + (1 - r) ** 2


class VEPath(CondOTPath):
    """Variance-exploding Gaussian path."""

    kind = "ve"

    def __init__(self, schedule: VESchedule):
        self.schedule = schedule

    def sample_t_given_1(self, x1, t, rng):
        sigma = self.schedule.sigma(t).unsqueeze(-1)
        return x1 + sigma * torch.randn(x1.shape, generator=rng, dtype=DTYPE)

    def log_prob_t_given_1(self, x_t, x1, t):
        return _gaussian_logpdf(x_t, x1, self.schedule.sigma(t) ** 2)

    def cond_generator_t1(self, x_t, x1, t):
        rate = (self.schedule.sigma_dot(t) / self.schedule.sigma(t)).unsqueeze(-1)
        return rate * (x_t - x1)

    def proposal_1_given_t(self, x_t, t, K, rng):
        return self._gaussian_draws(x_t, self.schedule.sigma(t) ** 2, K, rng)

    def _checked_bar_var(self, t, r):
        var = self.schedule.sigma(t) ** 2 - self.schedule.sigma(r) ** 2
        if torch.any(var <= 0):
            raise SingularityError("VE bootstrap variance is not positive")
        return var

    def backward_kernel_sample(self, x_r, r, t, rng):
        var = self._checked_bar_var(t, r).unsqueeze(-1)
        return x_r + var.sqrt() * torch.randn(x_r.shape, generator=rng, dtype=DTYPE)

    def backward_kernel_logpdf(self, x_t, x_r, t, r):
        return _gaussian_logpdf(x_t, x_r, self._checked_bar_var(t, r))

    def cond_generator_tr(self, x_t, x_r, t, r):
        var = self._checked_bar_var(t, r)
        sigma = self.schedule.sigma(t)
        coef = (sigma * self.schedule.sigma_dot(t) / var).unsqueeze(-1)
        return coef * (x_t - x_r)

    def proposal_r_given_t(self, x_t, t, r, K, rng):
        return self._gaussian_draws(x_t, self._checked_bar_var(t, r), K, rng)

    def log_Z_1_given_r(self, x_r, r):
        return torch.zeros(x_r.shape[:-1], dtype=DTYPE)

    def prior(self, batch_shape, dim, rng):
        noise = torch.randn(*batch_shape, dim, generator=rng, dtype=DTYPE)
        return self.schedule.sigma_max * noise

    def marginalize_gaussian(self, mean, var, r):
        return mean, var + self.schedule.sigma(r) ** 2


ContinuousPath = Union[CondOTPath, VEPath]


class PathBundle:
    """Coordinate-factorized product of a masked path and a Gaussian path."""

    def __init__(
        self,
        d_disc: int,
        d_cont: int,
        vocab_size: int = 2,
        discrete: Optional[MaskedPath] = None,
        continuous: Optional[ContinuousPath] = None,
    ):
        if d_disc + d_cont < 1:
            raise ValueError("state space must have at least one coordinate")
        if d_disc and discrete is None:
            discrete = MaskedPath(vocab_size)
        if d_cont and continuous is None:
            continuous = CondOTPath()
        self.d_disc = d_disc
        self.d_cont = d_cont
        self.vocab_size = vocab_size
        self.discrete = discrete if d_disc else None
        self.continuous = continuous if d_cont else None

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    def _zero_rates(self, batch_shape) -> torch.Tensor:
        return torch.zeros(*batch_shape, self.d_disc, self.vocab_size, dtype=DTYPE)

    def _zero_drift(self, batch_shape) -> torch.Tensor:
        return torch.zeros(*batch_shape, self.d_cont, dtype=DTYPE)

    def sample_t_given_1(self, x1: MixedState, t: Time, rng: torch.Generator) -> MixedState:
        """Draw x_t ~ p_{t|1}(·|x1) independently per coordinate."""
        if self.discrete and torch.any(x1.disc == self.mask_id):
            raise ValueError("x1 must not contain MASK tokens")
        t = as_time(t, x1.batch_shape)
        disc = self.discrete.sample_t_given_1(x1.disc, t, rng) if self.discrete else x1.disc
        cont = (
            self.continuous.sample_t_given_1(x1.cont, t, rng) if self.continuous else x1.cont
        )
        return MixedState(disc=disc, cont=cont)

    def log_prob_t_given_1(self, x_t: MixedState, x1: MixedState, t: Time) -> torch.Tensor:
        batch = torch.broadcast_shapes(x_t.batch_shape, x1.batch_shape)
        t = as_time(t, batch)
        logp = torch.zeros(batch, dtype=DTYPE)
        if self.discrete:
            logp = logp + self.discrete.log_prob_t_given_1(x_t.disc, x1.disc, t)
        if self.continuous:
            logp = logp + self.continuous.log_prob_t_given_1(x_t.cont, x1.cont, t)
        return logp

    def cond_generator_t1(self, x_t: MixedState, x1: MixedState, t: Time) -> GeneratorEstimate:
        """Conditional generator u_{t|1}(·, x_t | x1)."""
        batch = torch.broadcast_shapes(x_t.batch_shape, x1.batch_shape)
        t = as_time(t, batch)
        rates = (
            self.discrete.cond_generator_t1(x_t.disc, x1.disc, t)
            if self.discrete
            else self._zero_rates(batch)
        )
        drift = (
            self.continuous.cond_generator_t1(x_t.cont, x1.cont, t)
            if self.continuous
            else self._zero_drift(batch)
        )
        return GeneratorEstimate(rates=rates, drift=drift)

    def proposal_1_given_t(
        self, x_t: MixedState, t: Time, K: int, rng: torch.Generator
    ) -> Tuple[MixedState, torch.Tensor]:
        """K draws from q_{1|t}(·|x_t) ∝ p_{t|1}(x_t|·).

        Returns:
            Tuple: states of batch shape ``(*batch, K)`` and their log q
        """
        if K < 1:
            raise ValueError("K must be >= 1")
        t = as_time(t, x_t.batch_shape)
        return self._proposal(
            x_t,
            K,
            lambda path, x: path.proposal_1_given_t(x, t, K, rng),
        )

    def proposal_r_given_t(
        self, x_t: MixedState, t: Time, r: Time, K: int, rng: torch.Generator
    ) -> Tuple[MixedState, torch.Tensor]:
        """K draws from q_{r|t}(·|x_t) ∝ p_{t|r}(x_t|·)."""
        if K < 1:
            raise ValueError("K must be >= 1")
        t = as_time(t, x_t.batch_shape)
        r = as_time(r, x_t.batch_shape)
        _check_order(t, r)
        return self._proposal(
            x_t,
            K,
            lambda path, x: path.proposal_r_given_t(x, t, r, K, rng),
        )

    def _proposal(self, x_t: MixedState, K: int, draw):
        batch = (*x_t.batch_shape, K)
        log_q = torch.zeros(batch, dtype=DTYPE)
        if self.discrete:
            disc, lq = draw(self.discrete, x_t.disc)
            log_q = log_q + lq
        else:
            disc = x_t.disc.unsqueeze(-2).expand(*batch, 0)
        if self.continuous:
            cont, lq = draw(self.continuous, x_t.cont)
            log_q = log_q + lq
        else:
            cont = x_t.cont.unsqueeze(-2).expand(*batch, 0)
        return MixedState(disc=disc, cont=cont), log_q

    def backward_kernel_sample(
        self, x_r: MixedState, r: Time, t: Time, rng: torch.Generator
    ) -> MixedState:
        """Draw x_t ~ p_{t|r}(·|x_r) for t < r."""
        r = as_time(r, x_r.batch_shape)
        t = as_time(t, x_r.batch_shape)
        _check_order(t, r)
        disc = (
            self.discrete.backward_kernel_sample(x_r.disc, r, t, rng)
            if self.discrete
            else x_r.disc
        )
        cont = (
            self.continuous.backward_kernel_sample(x_r.cont, r, t, rng)
            if self.continuous
            else x_r.cont
        )
        return MixedState(disc=disc, cont=cont)

    def backward_kernel_logpdf(
        self, x_t: MixedState, x_r: MixedState, t: Time, r: Time
    ) -> torch.Tensor:
        """log p_{t|r}(x_t|x_r): exact density for flows, log-mass for tokens."""
        batch = torch.broadcast_shapes(x_t.batch_shape, x_r.batch_shape)
        t = as_time(t, batch)
        r = as_time(r, batch)
        _check_order(t, r)
        logp = torch.zeros(batch, dtype=DTYPE)
        if self.discrete:
            logp = logp + self.discrete.backward_kernel_logpdf(x_t.disc, x_r.disc, t, r)
        if self.continuous:
            logp = logp + self.continuous.backward_kernel_logpdf(x_t.cont, x_r.cont, t, r)
        return logp

    def cond_generator_tr(
        self, x_t: MixedState, x_r: MixedState, t: Time, r: Time
    ) -> GeneratorEstimate:
        """Bootstrap conditional generator u_{t|r}(·, x_t | x_r)."""
        batch = torch.broadcast_shapes(x_t.batch_shape, x_r.batch_shape)
        t = as_time(t, batch)
        r = as_time(r, batch)
        _check_order(t, r)
        rates = (
            self.discrete.cond_generator_tr(x_t.disc, x_r.disc, t, r)
            if self.discrete
            else self._zero_rates(batch)
        )
        drift = (
            self.continuous.cond_generator_tr(x_t.cont, x_r.cont, t, r)
            if self.continuous
            else self._zero_drift(batch)
        )
        return GeneratorEstimate(rates=rates, drift=drift)

    def log_Z_1_given_r(self, x_r: MixedState, r: Time) -> torch.Tensor:
        """log Z_{1|r}(x_r) = log ∫ p_{r|1}(x_r|x1) dx1."""
        r = as_time(r, x_r.batch_shape)
        if torch.any(r <= 0):
            raise ValueError("log Z_{1|r} requires r > 0")
        logz = torch.zeros(x_r.batch_shape, dtype=DTYPE)
        if self.discrete:
            logz = logz + self.discrete.log_Z_1_given_r(x_r.disc, r)
        if self.continuous:
            logz = logz + self.continuous.log_Z_1_given_r(x_r.cont, r)
        return logz

    def prior(self, batch_shape: Sequence[int], rng: torch.Generator) -> MixedState:
        """Draw from the t = 0 endpoint of the path."""
        disc = (
            self.discrete.prior(batch_shape, self.d_disc, rng)
            if self.discrete
            else torch.zeros(*batch_shape, 0, dtype=torch.long)
        )
        cont = (
            self.continuous.prior(batch_shape, self.d_cont, rng)
            if self.continuous
            else torch.zeros(*batch_shape, 0, dtype=DTYPE)
        )
        return MixedState(disc=disc, cont=cont)


def build_path(
    d_disc: int,
    d_cont: int,
    vocab_size: int = 2,
    continuous: str = "cond_ot",
    sigma_min: float = 0.01,
    sigma_max: float = 2.0,
) -> PathBundle:
    """Assemble the product path for a task layout."""
    if continuous == "ve":
        cont_path: ContinuousPath = VEPath(VESchedule(sigma_min, sigma_max))
    elif continuous == "cond_ot":
        cont_path = CondOTPath()
    else:
        raise ValueError(f"Unknown continuous path: {continuous}")
    return PathBundle(
        d_disc=d_disc,
        d_cont=d_cont,
        vocab_size=vocab_size,
        discrete=MaskedPath(vocab_size),
        continuous=cont_path,
    )
