"""Brute-force references for small instances.

Used by tests, acceptance checks and the ``egm oracle`` report; never by
training.
"""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from .energy import JointDW4Target, Target
from .estimators import EstimatorDiagnostics, bootstrap_generator, snis_generator
from .exceptions import EnumerationLimitError, UnsupportedTaskError
from .paths import CondOTPath, PathBundle, VEPath
from .types import DTYPE, MixedState

logger = logging.getLogger(__name__)

MAX_ENUMERATED = 12


def _completions(tokens: torch.Tensor, mask_id: int, vocab_size: int) -> torch.Tensor:
    """Every way of filling the masked entries of one token vector.

    Returns:
        torch.Tensor: ``(V^m, D)``
    """
    masked = torch.nonzero(tokens == mask_id).flatten()
    m = len(masked)
    if m > MAX_ENUMERATED:
        raise EnumerationLimitError(
            f"{m} masked positions exceed the enumeration cap of {MAX_ENUMERATED}"
        )
    if m == 0:
        return tokens.unsqueeze(0).clone()
    grid = torch.cartesian_prod(*[torch.arange(vocab_size)] * m).reshape(-1, m)
    filled = tokens.expand(len(grid), -1).clone()
    filled[:, masked] = grid
    return filled


def _single(x: MixedState) -> List[MixedState]:
    return [x] if len(x.batch_shape) == 0 else [x[i] for i in range(len(x))]


def exact_marginal_rates(
    x_t: MixedState, t: float, target: Target, path: PathBundle
) -> torch.Tensor:
    """Exact posterior-weighted unmasking rates for purely discrete targets.

    Args:
        x_t: One state, or a ``(B,)`` batch
        t: Time in [0, 1)

    Returns:
        torch.Tensor: ``(D, V)`` or ``(B, D, V)`` rate tables
    """
    if target.d_cont:
        raise UnsupportedTaskError("exact marginal rates need a purely discrete target")
    schedule = path.discrete.schedule
    t_ = torch.as_tensor(t, dtype=DTYPE)
    scale = schedule.kappa_dot(t_) / (1 - schedule.kappa(t_))
    V, mask_id = path.vocab_size, path.mask_id
    out = []
    for state in _single(x_t):
        completions = _completions(state.disc, mask_id, V)
        x1 = MixedState(disc=completions, cont=torch.zeros(len(completions), 0, dtype=DTYPE))
        # p_{t|1}(x_t|x1) is identical for every consistent completion
        weights = torch.softmax(-target(x1), dim=0)
        one_hot = torch.nn.functional.one_hot(completions, V).to(DTYPE)
        masked = (state.disc == mask_id).to(DTYPE).unsqueeze(-1)
        out.append(scale * masked * (weights[:, None, None] * one_hot).sum(dim=0))
    rates = torch.stack(out)
    return rates if x_t.batch_shape else rates[0]


def exact_intermediate_energy(
    x_r: MixedState, r, target: Target, path: PathBundle
) -> torch.Tensor:
    """−log ∫ p_{r|1}(x_r|x1) exp(−E_1(x1)) dx1, by enumeration and Gaussian integrals.

    Args:
        x_r: One state, or a ``(B,)`` batch
        r: Time in (0, 1], scalar or one per state

    Raises:
        UnsupportedTaskError: If the continuous part has no closed-form integral
    """
    if isinstance(target, JointDW4Target):
        raise UnsupportedTaskError("JointDW4 intermediate energy has no closed form")
    states = _single(x_r)
    r_all = torch.as_tensor(r, dtype=DTYPE).expand(len(states))
    V, mask_id = path.vocab_size, path.mask_id
    out = []
    for state, r_i in zip(states, r_all):
        completions = _completions(state.disc, mask_id, V)
        m = int((state.disc == mask_id).sum())
        n_known = state.d_disc - m
        log_disc = torch.zeros((), dtype=DTYPE)
        if state.d_disc:
            kappa = path.discrete.schedule.kappa(r_i)
            log_disc = n_known * torch.log(kappa)
            if m:
                log_disc = log_disc + m * torch.log1p(-kappa)
        if target.d_cont == 0:
            x1 = MixedState(
                disc=completions, cont=torch.zeros(len(completions), 0, dtype=DTYPE)
            )
            terms = log_disc - target(x1)
        else:
            conditional = target.gaussian_conditional(completions)
            if conditional is None:
                raise UnsupportedTaskError(
                    f"{target.name}: continuous part is not Gaussian-integrable"
                )
            log_mass, mean, var = conditional
            conv_mean, conv_var = path.continuous.marginalize_gaussian(mean, var, r_i)
            diff = state.cont - conv_mean
            log_normal = -0.5 * (
                (diff**2).sum(dim=-1) / conv_var
                + target.d_cont * torch.log(2 * math.pi * conv_var)
            )
            terms = log_disc + log_mass + log_normal
        out.append(-torch.logsumexp(terms, dim=0))
    energies = torch.stack(out)
    return energies if x_r.batch_shape else energies[0]


def _posterior_enumeration(
    path: PathBundle, t: float, r: float, x1: torch.Tensor, x_t: torch.Tensor
):
    """Exact p(x_r | x1, x_t) over token vectors: each position is x1 or MASK."""
    D = x1.shape[-1]
    if D > MAX_ENUMERATED:
        raise EnumerationLimitError(f"{D} tokens exceed the enumeration cap")
    pattern = torch.cartesian_prod(*[torch.tensor([0, 1])] * D).reshape(-1, D).bool()
    x_r = torch.where(pattern, torch.full_like(x1, path.mask_id).expand_as(pattern), x1)
    empty = torch.zeros(len(x_r), 0, dtype=DTYPE)
    states_r = MixedState(disc=x_r, cont=empty)
    state_t = MixedState(disc=x_t.expand_as(x_r), cont=empty)
    state_1 = MixedState(disc=x1.expand_as(x_r), cont=empty)
    log_w = path.backward_kernel_logpdf(state_t, states_r, t, r) + path.log_prob_t_given_1(
        states_r, state_1, r
    )
    return states_r, state_t, torch.softmax(log_w, dim=0)


def check_consistency_eq13(
    path: PathBundle,
    t: float,
    r: float,
    x1: MixedState,
    x_t: MixedState,
    n_mc: int = 1_000_000,
    rng: Optional[torch.Generator] = None,
) -> Dict[str, float]:
    """|E_{x_r ~ p(x_r | x1, x_t)}[u_{t|r}(x_t | x_r)] − u_{t|1}(x_t | x1)| (sup norm).

    Tokens are checked by exact enumeration, CondOT through its closed-form
    posterior mean and VE by Monte Carlo.

    Returns:
        Dict[str, float]: ``deviation`` and the Monte-Carlo ``stderr`` (0 when exact)
    """
    if not t < r:
        raise ValueError("consistency check requires t < r")
    deviation, stderr = 0.0, 0.0
    direct = path.cond_generator_t1(x_t, x1, t)

    if path.discrete is not None and x1.d_disc:
        sub = PathBundle(x1.d_disc, 0, path.vocab_size, discrete=path.discrete)
        states_r, state_t, w = _posterior_enumeration(sub, t, r, x1.disc, x_t.disc)
        composed = sub.cond_generator_tr(state_t, states_r, t, r).rates
        mean_rates = (w[:, None, None] * composed).sum(dim=0)
        deviation = max(deviation, float((mean_rates - direct.rates).abs().max()))

    cont_path = path.continuous
    if cont_path is not None and x1.d_cont:
        t_ = torch.as_tensor(t, dtype=DTYPE)
        r_ = torch.as_tensor(r, dtype=DTYPE)
        if isinstance(cont_path, VEPath):
            s_t2 = cont_path.schedule.sigma(t_) ** 2
            s_r2 = cont_path.schedule.sigma(r_) ** 2
            post_mean = x1.cont + (s_r2 / s_t2) * (x_t.cont - x1.cont)
            post_std = torch.sqrt(s_r2 * (s_t2 - s_r2) / s_t2)
            draws = post_mean + post_std * torch.randn(
                n_mc, x1.d_cont, generator=rng, dtype=DTYPE
            )
            u = cont_path.cond_generator_tr(
                x_t.cont.expand_as(draws), draws, t_.expand(n_mc), r_.expand(n_mc)
            )
            mean_u = u.mean(dim=0)
            stderr = float(u.std(dim=0).max()) / math.sqrt(n_mc)
        else:
            sigma_bar = CondOTPath.bar_var(t_, r_)
            mu = (t_ * (1 - r_) ** 2 / (r_ * (1 - t_) ** 2)) * x_t.cont + (
                r_ * sigma_bar / (1 - t_) ** 2
            ) * x1.cont
            mean_u = cont_path.cond_generator_tr(x_t.cont, mu, t_, r_)
        deviation = max(deviation, float((mean_u - direct.drift).abs().max()))
    return {"deviation": deviation, "stderr": stderr}


def check_chapman_kolmogorov(
    path: PathBundle,
    t: float,
    r: float,
    x1: MixedState,
    n_mc: int = 1_000_000,
    rng: Optional[torch.Generator] = None,
) -> Dict[str, float]:
    """Compare p_{r|1} followed by p_{t|r} against p_{t|1}.

    Tokens: exact keep-probability error of the first position. Coordinates:
    absolute mean/variance errors of composed vs direct draws and their
    standard errors.
    """
    if not t < r:
        raise ValueError("Chapman-Kolmogorov check requires t < r")
    report: Dict[str, float] = {}
    t_ = torch.as_tensor(t, dtype=DTYPE)
    r_ = torch.as_tensor(r, dtype=DTYPE)

    if path.discrete is not None and x1.d_disc:
        mp = path.discrete
        token = x1.disc[..., :1].reshape(1, 1)
        masked = torch.full_like(token, mp.mask_id)
        # x_t = x1 is reachable only through x_r = x1
        composed = mp.log_prob_t_given_1(token, token, r_.reshape(1)).exp() * (
            mp.backward_kernel_logpdf(token, token, t_.reshape(1), r_.reshape(1)).exp()
        )
        direct = mp.log_prob_t_given_1(token, token, t_.reshape(1)).exp()
        composed_mask = 1 - composed
        direct_mask = mp.log_prob_t_given_1(masked, token, t_.reshape(1)).exp()
        report["token_error"] = float(
            torch.maximum((composed - direct).abs(), (composed_mask - direct_mask).abs()).max()
        )

    if path.continuous is not None and x1.d_cont:
        cp = path.continuous
        x = x1.cont.reshape(1, -1).expand(n_mc, -1)
        x_r = cp.sample_t_given_1(x, r_.expand(n_mc), rng)
        composed = cp.backward_kernel_sample(x_r, r_.expand(n_mc), t_.expand(n_mc), rng)
        direct = cp.sample_t_given_1(x, t_.expand(n_mc), rng)
        report["mean_error"] = float((composed.mean(0) - direct.mean(0)).abs().max())
        report["var_error"] = float((composed.var(0) - direct.var(0)).abs().max())
        var = direct.var(0)
        report["mean_stderr"] = float(torch.sqrt(2 * var / n_mc).max())
        report["var_stderr"] = float((var * math.sqrt(2 * 2.0 / (n_mc - 1))).max())
    return report


def default_probe_state(target: Target, path: PathBundle) -> MixedState:
    """Probe with every other token masked, the rest spin-up."""
    disc = torch.ones(target.d_disc, dtype=torch.long)
    disc[::2] = path.mask_id
    return MixedState(disc=disc, cont=torch.zeros(0, dtype=DTYPE))


def snis_convergence_report(
    target: Target,
    path: PathBundle,
    t: float,
    K_list: Sequence[int],
    seeds: Sequence[int],
    x_t: Optional[MixedState] = None,
    epsilon: Optional[float] = None,
) -> Dict[str, Any]:
    """Error of sampled SNIS against exact rates per K, with the fitted log-log
    slope of the mean squared error.

    With ``epsilon`` set, also reports the ESS of bootstrap weights computed with
    the exact intermediate energy at r = min(t + ε, 1).
    """
    x_t = x_t if x_t is not None else default_probe_state(target, path)
    exact = exact_marginal_rates(x_t, t, target, path)
    scale = float(exact.abs().max()) or 1.0
    batch = x_t.unsqueeze(0)
    rows = []
    for K in K_list:
        errors, sq_errors = [], []
        diag_plain = EstimatorDiagnostics()
        diag_bs = EstimatorDiagnostics()
        for seed in seeds:
            rng = torch.Generator().manual_seed(seed)
            est = snis_generator(batch, t, path, target, K, rng, diagnostics=diag_plain)
            diff = est.rates[0] - exact
            errors.append(float(diff.abs().max()) / scale)
            sq_errors.append(float((diff**2).sum()))
            if epsilon is not None:
                r = min(t + epsilon, 1.0)
                bootstrap_generator(
                    batch,
                    t,
                    r,
                    path,
                    lambda s, times: exact_intermediate_energy(s, times, target, path),
                    K,
                    rng,
                    target=target,
                    diagnostics=diag_bs,
                )
        row = {
            "K": K,
            "mean_rel_error": float(np.mean(errors)),
            "max_rel_error": float(np.max(errors)),
            "mse": float(np.mean(sq_errors)),
            "ess_plain": diag_plain.ess_mean,
        }
        if epsilon is not None:
            row["ess_bootstrap"] = diag_bs.ess_mean
        rows.append(row)

    slope = float("nan")
    mse = np.array([row["mse"] for row in rows])
    if len(rows) >= 2 and np.all(mse > 0):
        slope = float(np.polyfit(np.log(list(K_list)), np.log(mse), 1)[0])
    logger.info(f"SNIS convergence slope {slope:.3f} over K={list(K_list)}")
    return {"rows": rows, "slope": slope}
