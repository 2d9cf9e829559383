"""Bi-level replay-buffer training of the sampler and intermediate-energy networks.

The outer loop simulates the current sampler and refills the replay buffer;
the inner loop regresses the sampler onto Monte-Carlo generator estimates
(plain SNIS, or bootstrapped through a learned intermediate energy).
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .. import __version__
from ..config import TrainConfig, settings
from ..models.nets import EnergyNet, SamplerNet, backward
from ..models.optim import NetworkParams, adamw_step
from .baselines import ground_truth
from .energy import Target, build_target
from .estimators import (
    EstimatorDiagnostics,
    bootstrap_generator,
    clip_energy,
    clip_generator,
    intermediate_energy_target,
    snis_generator,
)
from .exceptions import CheckpointError, InvalidStateError
from .metrics import evaluate
from .paths import PathBundle, build_path
from .simulate import model_generator, simulate
from .storage import RunStore, load_checkpoint
from .types import DTYPE, GeneratorEstimate, MixedState, RunManifest

logger = logging.getLogger(__name__)


class ReplayBuffer:
    """Bounded FIFO of terminal samples, sampled uniformly with replacement.

    Storage is a ring of preallocated tensors; once full, each push overwrites
    the oldest entries.
    """

    def __init__(self, capacity: int, d_disc: int, d_cont: int, mask_id: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.mask_id = mask_id
        self.disc = torch.zeros(capacity, d_disc, dtype=torch.long)
        self.cont = torch.zeros(capacity, d_cont, dtype=DTYPE)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, states: MixedState):
        """Append a ``(n,)`` batch of terminal states.

        Raises:
            InvalidStateError: On MASK tokens, non-finite coordinates or a layout
                that does not match the buffer
        """
        if states.d_disc != self.disc.shape[1] or states.d_cont != self.cont.shape[1]:
            raise InvalidStateError("state layout does not match the replay buffer")
        if torch.any(states.disc == self.mask_id):
            raise InvalidStateError("replay buffer rejects masked states")
        if not torch.isfinite(states.cont).all():
            raise InvalidStateError("replay buffer rejects non-finite coordinates")
        states = states.flatten()[-self.capacity :]
        n = len(states)
        idx = (self.ptr + torch.arange(n)) % self.capacity
        self.disc[idx] = states.disc
        self.cont[idx] = states.cont.to(DTYPE)
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def sample(self, n: int, rng: torch.Generator) -> MixedState:
        if self.size == 0:
            raise InvalidStateError("replay buffer is empty")
        idx = torch.randint(0, self.size, (n,), generator=rng)
        return MixedState(disc=self.disc[idx], cont=self.cont[idx])

    def states(self) -> MixedState:
        return MixedState(disc=self.disc[: self.size], cont=self.cont[: self.size])

    def arrays(self) -> Dict[str, torch.Tensor]:
        return {"buffer/disc": self.disc, "buffer/cont": self.cont}

    def counters(self) -> Dict[str, int]:
        return {"ptr": self.ptr, "size": self.size, "capacity": self.capacity}

    def load(self, arrays: Dict[str, torch.Tensor], counters: Dict[str, int]):
        if counters["capacity"] != self.capacity:
            raise CheckpointError(
                f"buffer capacity {counters['capacity']} does not match {self.capacity}"
            )
        self.disc = arrays["buffer/disc"].reshape(self.disc.shape).long().clone()
        self.cont = arrays["buffer/cont"].reshape(self.cont.shape).to(DTYPE).clone()
        self.ptr = counters["ptr"]
        self.size = counters["size"]


def egm_loss(
    sampler: nn.Module,
    path: PathBundle,
    x_t: MixedState,
    t: torch.Tensor,
    target: GeneratorEstimate,
    lambda_disc: float = 5.0,
    lambda_cont: float = 1.0,
) -> torch.Tensor:
    """Squared-error generator regression.

    λ_disc · mean‖rates − target.rates‖² over masked positions plus
    λ_cont · mean‖drift − target.drift‖², both averaged over the batch.
    """
    pred = model_generator(sampler, path)(x_t, t)
    if pred.rates.shape != target.rates.shape or pred.drift.shape != target.drift.shape:
        raise ValueError(
            f"generator shapes differ: rates {tuple(pred.rates.shape)} vs "
            f"{tuple(target.rates.shape)}, drift {tuple(pred.drift.shape)} vs "
            f"{tuple(target.drift.shape)}"
        )
    masked = (x_t.disc == path.mask_id).unsqueeze(-1)
    loss_disc = ((pred.rates - target.rates) ** 2 * masked).sum(dim=(-2, -1)).mean()
    loss_cont = ((pred.drift - target.drift) ** 2).sum(dim=-1).mean()
    return lambda_disc * loss_disc + lambda_cont * loss_cont


def egm_bs_loss(
    sampler: nn.Module,
    energy_model,
    path: PathBundle,
    x_t: MixedState,
    t: torch.Tensor,
    epsilon: float,
    K: int,
    rng: torch.Generator,
    *,
    target: Optional[Target] = None,
    generator_clip: Optional[float] = None,
    lambda_disc: float = 5.0,
    lambda_cont: float = 1.0,
    diagnostics: Optional[EstimatorDiagnostics] = None,
    fallback: bool = True,
) -> torch.Tensor:
    """Bootstrapped regression: estimate at r = min(t + ε, 1), then ``egm_loss``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    r = torch.clamp(t + epsilon, max=1.0)
    estimate = bootstrap_generator(
        x_t,
        t,
        r,
        path,
        energy_model,
        K,
        rng,
        target=target,
        diagnostics=diagnostics,
        fallback=fallback,
    )
    if generator_clip is not None:
        estimate = clip_generator(estimate, generator_clip)
    return egm_loss(sampler, path, x_t, t, estimate, lambda_disc, lambda_cont)


def nem_loss(
    energy_net: nn.Module, x_r: MixedState, r: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Mean squared error between E_φ(x_r, r) and the estimated intermediate energies."""
    return ((energy_net(x_r, r) - targets) ** 2).mean()


def resolve_residual_masks(
    sampler: nn.Module, states: MixedState, mask_id: int
) -> Tuple[MixedState, int]:
    """Unmask tokens still masked at t = 1 with the denoiser's most likely token."""
    masked = states.disc == mask_id
    count = int(masked.sum())
    if not count:
        return states, 0
    with torch.no_grad():
        probs, _ = sampler(states, torch.ones(states.batch_shape, dtype=DTYPE))
    disc = torch.where(masked, probs.argmax(dim=-1), states.disc)
    logger.warning(f"Resolved {count} residual masked token(s) by denoiser argmax")
    return MixedState(disc=disc, cont=states.cont), count


def draw_samples(
    sampler: nn.Module, path: PathBundle, n: int, n_steps: int, rng: torch.Generator
) -> Tuple[MixedState, int]:
    """Terminal samples with residual masks resolved, plus the resolved count."""
    states = simulate(sampler, path, n_steps, n, rng)
    return resolve_residual_masks(sampler, states, path.mask_id)


def outer_step(
    sampler: nn.Module,
    buffer: ReplayBuffer,
    path: PathBundle,
    target: Target,
    config: TrainConfig,
    rng: torch.Generator,
) -> Dict[str, float]:
    """Simulate ``samples_per_outer`` terminal states and push them to the buffer."""
    states, resolved = draw_samples(
        sampler, path, config.samples_per_outer, config.simulation_steps, rng
    )
    buffer.push(states)
    return {
        "buffer_energy_mean": float(target(states).mean()),
        "resolved_masks": resolved,
    }


def sample_times(batch: int, t_min: float, rng: torch.Generator) -> torch.Tensor:
    """t ~ Unif[t_min, 1 − t_min]."""
    return t_min + (1 - 2 * t_min) * torch.rand(batch, generator=rng, dtype=DTYPE)


def inner_step(
    sampler_params: NetworkParams,
    energy_params: Optional[NetworkParams],
    buffer: ReplayBuffer,
    path: PathBundle,
    target: Target,
    config: TrainConfig,
    rng: torch.Generator,
    diagnostics: Optional[EstimatorDiagnostics] = None,
) -> Dict[str, float]:
    """One regression step.

    Plain mode: SNIS estimate from the true energy, then a sampler update.
    Bootstrap mode: NEM update of the energy network on x_r ~ p_{r|1}, then a
    sampler update with weights from the EMA energy network, then the EMA
    update.

    Returns:
        Dict[str, float]: ``loss_egm`` and ``loss_nem`` (NaN in plain mode)
    """
    if len(buffer) == 0:
        raise InvalidStateError("inner step needs a nonempty replay buffer")
    K = config.num_mc_samples
    generator_clip, energy_clip = config.clip_norms
    x1 = buffer.sample(config.batch_size, rng)
    t = sample_times(config.batch_size, config.t_min, rng)
    loss_nem = math.nan

    if config.bootstrap:
        if energy_params is None:
            raise ValueError("bootstrap mode needs an energy network")
        r = torch.clamp(t + config.epsilon, max=1.0)
        x_r = path.sample_t_given_1(x1, r, rng)
        targets = intermediate_energy_target(x_r, r, path, target, K, rng, fallback=True)
        usable = torch.isfinite(targets)
        if torch.any(usable):
            loss = nem_loss(
                energy_params.net,
                x_r[usable],
                r[usable],
                clip_energy(targets[usable], energy_clip),
            )
            backward(energy_params.net, loss)
            adamw_step(energy_params)
            loss_nem = float(loss.detach())

        x_t = path.sample_t_given_1(x1, t, rng)
        loss = egm_bs_loss(
            sampler_params.net,
            energy_params.ema_net(),
            path,
            x_t,
            t,
            config.epsilon,
            K,
            rng,
            target=target,
            generator_clip=generator_clip,
            lambda_disc=config.lambda_disc,
            lambda_cont=config.lambda_cont,
            diagnostics=diagnostics,
        )
    else:
        x_t = path.sample_t_given_1(x1, t, rng)
        estimate = snis_generator(
            x_t, t, path, target, K, rng, diagnostics=diagnostics, fallback=True
        )
        loss = egm_loss(
            sampler_params.net,
            path,
            x_t,
            t,
            clip_generator(estimate, generator_clip),
            config.lambda_disc,
            config.lambda_cont,
        )

    backward(sampler_params.net, loss)
    adamw_step(sampler_params)
    if energy_params is not None and config.bootstrap:
        energy_params.update_ema()
    return {"loss_egm": float(loss.detach()), "loss_nem": loss_nem}


def configure_numerics():
    """Reference mode: one thread and deterministic kernels."""
    if settings.reference_mode:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(settings.num_threads)


@dataclass
class TrainResult:
    sampler: SamplerNet
    energy_net: Optional[EnergyNet]
    metrics_path: Path
    manifest: RunManifest
    buffer: ReplayBuffer
    diagnostics: Dict[str, Any]


class Trainer:
    """Owns every piece of mutable training state and its checkpoint layout."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.target = build_target(config.task)
        self.path = task_path(config, self.target)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.sampler, self.energy_net = build_networks(config, self.target, self.rng)

        total = config.total_inner_steps
        self.sampler_params = NetworkParams(
            self.sampler,
            lr=config.lr,
            lr_min=config.lr_min,
            total_steps=total,
            weight_decay=config.weight_decay,
        )
        self.energy_params = None
        if self.energy_net is not None:
            self.energy_params = NetworkParams(
                self.energy_net,
                lr=config.energy_lr,
                lr_min=config.lr_min,
                total_steps=total,
                weight_decay=config.weight_decay,
                ema_decay=config.ema_decay if config.use_ema else None,
            )
        self.buffer = ReplayBuffer(
            config.buffer_capacity, self.target.d_disc, self.target.d_cont, self.path.mask_id
        )
        self.diagnostics = EstimatorDiagnostics()
        self.outer = 0
        self.resolved_masks = 0
        self.degenerate = 0

    def checkpoint_arrays(self) -> Dict[str, torch.Tensor]:
        arrays = {f"sampler/{k}": v for k, v in self.sampler_params.arrays().items()}
        if self.energy_params is not None:
            arrays.update(
                {f"energy/{k}": v for k, v in self.energy_params.arrays().items()}
            )
        arrays.update(self.buffer.arrays())
        arrays["rng/state"] = self.rng.get_state()
        return arrays

    def checkpoint_meta(self) -> Dict[str, Any]:
        meta = {
            "outer": self.outer,
            "config": self.config.model_dump(mode="json"),
            "sampler": {
                "descriptor": self.sampler.descriptor(),
                "counters": self.sampler_params.counters(),
            },
            "buffer": self.buffer.counters(),
            "resolved_masks": self.resolved_masks,
            "degenerate": self.degenerate,
        }
        if self.energy_params is not None:
            meta["energy"] = {
                "descriptor": self.energy_net.descriptor(),
                "counters": self.energy_params.counters(),
            }
        return meta

    def restore(self, arrays: Dict[str, torch.Tensor], meta: Dict[str, Any]):
        def scoped(prefix: str) -> Dict[str, torch.Tensor]:
            return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

        self.sampler_params.load(scoped("sampler/"), meta["sampler"]["counters"])
        if self.energy_params is not None:
            if "energy" not in meta:
                raise CheckpointError("checkpoint has no energy network")
            self.energy_params.load(scoped("energy/"), meta["energy"]["counters"])
        self.buffer.load(arrays, meta["buffer"])
        self.rng.set_state(arrays["rng/state"].to(torch.uint8))
        self.outer = meta["outer"]
        self.resolved_masks = meta.get("resolved_masks", 0)
        self.degenerate = meta.get("degenerate", 0)

    def run_outer(self, rows: List[Dict[str, Any]], start_time: float):
        config = self.config
        stats = outer_step(
            self.sampler, self.buffer, self.path, self.target, config, self.rng
        )
        self.resolved_masks += stats["resolved_masks"]
        self.diagnostics.reset()
        losses_egm: List[float] = []
        losses_nem: List[float] = []
        for inner in range(config.inner_steps):
            losses = inner_step(
                self.sampler_params,
                self.energy_params,
                self.buffer,
                self.path,
                self.target,
                config,
                self.rng,
                self.diagnostics,
            )
            losses_egm.append(losses["loss_egm"])
            losses_nem.append(losses["loss_nem"])
            last = inner == config.inner_steps - 1
            if (inner + 1) % config.log_interval == 0 or last:
                rows.append(
                    {
                        "outer": self.outer,
                        "inner": inner,
                        "loss_egm": sum(losses_egm) / len(losses_egm),
                        "loss_nem": sum(losses_nem) / len(losses_nem),
                        "ess_mean": self.diagnostics.ess_mean,
                        "buffer_energy_mean": stats["buffer_energy_mean"],
                        "lr": self.sampler_params.current_lr,
                        "wallclock_s": time.perf_counter() - start_time,
                    }
                )
                self.degenerate += self.diagnostics.degenerate
                self.diagnostics.reset()
                losses_egm.clear()
                losses_nem.clear()
        logger.info(
            f"Outer {self.outer + 1}/{config.outer_iterations}: "
            f"loss_egm={rows[-1]['loss_egm']:.4g}, "
            f"buffer_energy_mean={stats['buffer_energy_mean']:.4g}, "
            f"buffer size={len(self.buffer)}"
        )
        self.outer += 1


def task_path(config: TrainConfig, target: Target) -> PathBundle:
    return build_path(
        target.d_disc,
        target.d_cont,
        target.vocab_size,
        continuous=config.path.continuous,
        sigma_min=config.path.sigma_min,
        sigma_max=config.path.sigma_max,
    )


def build_networks(
    config: TrainConfig, target: Target, rng: Optional[torch.Generator] = None
) -> Tuple[SamplerNet, Optional[EnergyNet]]:
    """Sampler network, plus the intermediate-energy network in bootstrap mode."""
    sampler = SamplerNet(
        target.d_disc, target.d_cont, target.vocab_size, config.net, rng=rng
    )
    energy_net = None
    if config.bootstrap:
        correction = None
        if config.forward_looking and target.forward_looking:
            correction = target.determined_energy
        energy_net = EnergyNet(
            target.d_disc,
            target.d_cont,
            target.vocab_size,
            config.net,
            rng=rng,
            correction=correction,
        )
    return sampler, energy_net


def train(
    config: TrainConfig, output_dir: Optional[Path] = None, resume: bool = False
) -> TrainResult:
    """Run the bi-level loop, checkpointing after every outer iteration.

    Args:
        config: Validated training configuration
        output_dir: Run directory; ``config.output_dir`` or ``<runs_dir>/<task>_seed<seed>``
            when omitted
        resume: Continue from the latest complete checkpoint in ``output_dir``

    Returns:
        TrainResult: Trained networks, buffer and run records
    """
    configure_numerics()
    root = Path(
        output_dir
        or config.output_dir
        or Path(settings.runs_dir) / f"{config.task.task}_seed{config.seed}"
    )
    store = RunStore(root)
    manifest = store.initialize(
        config.model_dump(mode="json"), config.seed, __version__, resume=resume
    )
    trainer = Trainer(config)
    rows: List[Dict[str, Any]] = []

    if resume:
        latest = store.latest_checkpoint()
        if latest is None:
            logger.info(f"No checkpoint under {root}, starting from scratch")
        else:
            arrays, meta = load_checkpoint(latest)
            trainer.restore(arrays, meta)
            rows = [row for row in store.read_metrics() if int(row["outer"]) < trainer.outer]
            logger.info(f"Resumed from {latest} after {trainer.outer} outer iteration(s)")

    start = time.perf_counter()
    try:
        while trainer.outer < config.outer_iterations:
            trainer.run_outer(rows, start)
            store.write_metrics(rows)
            store.write_checkpoint(
                trainer.outer, trainer.checkpoint_arrays(), trainer.checkpoint_meta()
            )
    except Exception as e:
        logger.error(f"Training failed at outer iteration {trainer.outer}: {e}")
        store.finalize("failed")
        raise
    store.write_metrics(rows)
    store.finalize("completed")
    if trainer.resolved_masks:
        logger.warning(f"{trainer.resolved_masks} residual mask(s) resolved during training")
    return TrainResult(
        sampler=trainer.sampler,
        energy_net=trainer.energy_net,
        metrics_path=store.metrics_path,
        manifest=manifest,
        buffer=trainer.buffer,
        diagnostics={
            "resolved_masks": trainer.resolved_masks,
            "degenerate": trainer.degenerate,
            "skipped_steps": trainer.sampler_params.skipped,
        },
    )


def load_trained(checkpoint: Path) -> Trainer:
    """Rebuild a trainer (networks, buffer, RNG) from a checkpoint directory."""
    arrays, meta = load_checkpoint(checkpoint)
    config = TrainConfig.model_validate(meta["config"])
    trainer = Trainer(config)
    trainer.restore(arrays, meta)
    return trainer


def ess_trace(
    target: Target,
    path: PathBundle,
    energy_model,
    x1: MixedState,
    t_grid: Sequence[float],
    K: int,
    epsilon: float,
    rng: torch.Generator,
) -> List[Dict[str, float]]:
    """Mean normalized ESS of plain and bootstrapped weights along a time grid.

    Regression points are x_t ~ p_{t|1}(·|x1) for the supplied terminal states.
    """
    rows = []
    for t in t_grid:
        x_t = path.sample_t_given_1(x1, t, rng)
        t_ = torch.full(x1.batch_shape, float(t), dtype=DTYPE)
        plain = EstimatorDiagnostics()
        snis_generator(x_t, t_, path, target, K, rng, diagnostics=plain, fallback=True)
        boot = EstimatorDiagnostics()
        r = torch.clamp(t_ + epsilon, max=1.0)
        bootstrap_generator(
            x_t,
            t_,
            r,
            path,
            energy_model,
            K,
            rng,
            target=target,
            diagnostics=boot,
            fallback=True,
        )
        rows.append(
            {"t": float(t), "ess_plain": plain.ess_mean, "ess_bootstrap": boot.ess_mean}
        )
    return rows


def sweep_epsilon(
    config: TrainConfig,
    epsilons: Sequence[float],
    output_dir: Path,
    seeds: Optional[Sequence[int]] = None,
    reference: Optional[MixedState] = None,
    n_eval: int = 2000,
) -> List[Dict[str, Any]]:
    """Train one bootstrap run per (ε, seed) and tabulate sample-quality metrics."""
    seeds = list(seeds) if seeds else [config.seed]
    target = build_target(config.task)
    if reference is None:
        reference = ground_truth(target, n_eval, torch.Generator().manual_seed(10_000))
    rows = []
    for eps in epsilons:
        for seed in seeds:
            run_config = config.model_copy(update={"epsilon": eps, "seed": seed})
            result = train(run_config, Path(output_dir) / f"eps{eps:g}_seed{seed}")
            samples, _ = draw_samples(
                result.sampler,
                task_path(config, target),
                n_eval,
                config.simulation_steps,
                torch.Generator().manual_seed(seed + 1),
            )
            metrics = evaluate(target, samples, reference)
            row = {"epsilon": eps, "seed": seed, "e_w1": metrics["e_w1"]}
            if "m_w1" in metrics:
                row["m_w1"] = metrics["m_w1"]
            rows.append(row)
            logger.info(f"ε={eps:g} seed={seed}: E-W1={metrics['e_w1']:.4f}")
    return rows
