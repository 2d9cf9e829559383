"""Optimizer stack: AdamW with skip-on-non-finite, cosine schedule and EMA."""

import copy
import logging
import math
from typing import Any, Dict, Iterable, Optional

import torch
from torch import nn
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR

from ..core.types import DTYPE

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total: int, lr_max: float = 1e-3, lr_min: float = 1e-5) -> float:
    """lr_min + ½(lr_max − lr_min)(1 + cos(π step / total))."""
    if total <= 0:
        return lr_max
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


@torch.no_grad()
def ema_update(
    shadow: Iterable[torch.Tensor], params: Iterable[torch.Tensor], decay: float
):
    """shadow ← decay · shadow + (1 − decay) · params, in place."""
    shadow = list(shadow)
    params = list(params)
    if len(shadow) != len(params):
        raise ValueError("shadow and parameter lists differ in length")
    for s, p in zip(shadow, params):
        s.lerp_(p.detach(), 1.0 - decay)


class NetworkParams:
    """Owns a network together with its AdamW moments, schedule and EMA shadow.

    Attributes:
        net: The trained module
        optimizer: AdamW over ``net.parameters()``
        scheduler: Cosine annealing over ``total_steps`` optimizer steps
        shadow: EMA copy of the parameters, or None when EMA is off
        step: Number of applied optimizer steps
        skipped: Number of steps dropped for non-finite gradients
    """

    def __init__(
        self,
        net: nn.Module,
        lr: float = 1e-3,
        lr_min: float = 1e-5,
        total_steps: int = 1,
        weight_decay: float = 0.0,
        ema_decay: Optional[float] = None,
    ):
        self.net = net
        self.lr = lr
        self.optimizer = AdamW(
            net.parameters(),
            lr=lr,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=weight_decay,
        )
        self.scheduler = CosineAnnealingLR(
            self.optimizer, T_max=max(total_steps, 1), eta_min=lr_min
        )
        self.ema_decay = ema_decay
        self.shadow = (
            [p.detach().clone() for p in net.parameters()] if ema_decay is not None else None
        )
        self.step = 0
        self.skipped = 0
        self._snapshot: Optional[nn.Module] = None

    @property
    def current_lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def flat(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.net.parameters()).detach()

    def ema_net(self) -> nn.Module:
        """Frozen copy of the network carrying the EMA weights (raw weights if EMA is off).

        The same module is refreshed and returned on every call.
        """
        if self._snapshot is None:
            self._snapshot = copy.deepcopy(self.net).requires_grad_(False)
        source = self.shadow if self.shadow is not None else self.net.parameters()
        with torch.no_grad():
            for p, s in zip(self._snapshot.parameters(), source):
                p.copy_(s)
        return self._snapshot

    def update_ema(self):
        if self.shadow is not None:
            ema_update(self.shadow, self.net.parameters(), self.ema_decay)

    # checkpoint support

    def arrays(self) -> Dict[str, torch.Tensor]:
        """Every tensor needed to resume bitwise, keyed by a stable name."""
        out: Dict[str, torch.Tensor] = {}
        for i, (name, p) in enumerate(self.net.named_parameters()):
            out[f"param/{name}"] = p.detach()
            state = self.optimizer.state.get(p, {})
            if state:
                out[f"adam_m/{name}"] = state["exp_avg"]
                out[f"adam_v/{name}"] = state["exp_avg_sq"]
            if self.shadow is not None:
                out[f"ema/{name}"] = self.shadow[i]
        return out

    def counters(self) -> Dict[str, Any]:
        adam_steps = {
            name: float(self.optimizer.state[p]["step"])
            for name, p in self.net.named_parameters()
            if p in self.optimizer.state
        }
        return {
            "step": self.step,
            "skipped": self.skipped,
            "adam_steps": adam_steps,
            "scheduler": self.scheduler.state_dict(),
            "lr": self.current_lr,
        }

    def load(self, arrays: Dict[str, torch.Tensor], counters: Dict[str, Any]):
        with torch.no_grad():
            for i, (name, p) in enumerate(self.net.named_parameters()):
                p.copy_(arrays[f"param/{name}"].reshape(p.shape))
                if f"adam_m/{name}" in arrays:
                    self.optimizer.state[p] = {
                        "step": torch.tensor(counters["adam_steps"][name], dtype=torch.float32),
                        "exp_avg": arrays[f"adam_m/{name}"].reshape(p.shape).to(DTYPE).clone(),
                        "exp_avg_sq": arrays[f"adam_v/{name}"]
                        .reshape(p.shape)
                        .to(DTYPE)
                        .clone(),
                    }
                if self.shadow is not None and f"ema/{name}" in arrays:
                    self.shadow[i] = arrays[f"ema/{name}"].reshape(p.shape).to(DTYPE).clone()
        self.scheduler.load_state_dict(counters["scheduler"])
        for group in self.optimizer.param_groups:
            group["lr"] = counters["lr"]
        self.step = counters["step"]
        self.skipped = counters["skipped"]


def adamw_step(params: NetworkParams) -> bool:
    """Apply one AdamW update from the gradients in ``.grad`` and advance the schedule.

    Steps with a non-finite gradient are dropped and counted.

    Returns:
        bool: Whether the update was applied
    """
    grads = [p.grad for p in params.net.parameters() if p.grad is not None]
    if any(not torch.isfinite(g).all() for g in grads):
        params.skipped += 1
        logger.warning(
            f"Skipping optimizer step {params.step}: non-finite gradient "
            f"({params.skipped} skipped so far)"
        )
        params.optimizer.zero_grad(set_to_none=True)
        return False
    params.optimizer.step()
    params.optimizer.zero_grad(set_to_none=True)
    if params.scheduler.last_epoch < params.scheduler.T_max:
        params.scheduler.step()
    params.step += 1
    return True
