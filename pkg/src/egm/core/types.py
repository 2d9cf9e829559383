"""Core type definitions for the sampler toolkit."""

from dataclasses import dataclass
from typing import Annotated, Any, Dict, List, Literal, Optional, Sequence, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DTYPE = torch.float64


@dataclass
class MixedState:
    """A batch of points in tokens^{D_disc} x R^{D_cont}.

    ``disc`` holds token ids with shape ``(*batch, D_disc)`` and ``cont`` holds
    coordinates with shape ``(*batch, D_cont)``. Either trailing dimension may be
    zero, never both.
    """

    disc: torch.Tensor
    cont: torch.Tensor

    def __post_init__(self):
        if self.disc.shape[:-1] != self.cont.shape[:-1]:
            raise ValueError(
                f"Batch shapes differ: disc {tuple(self.disc.shape)}, "
                f"cont {tuple(self.cont.shape)}"
            )

    @classmethod
    def empty(
        cls, batch_shape: Sequence[int], d_disc: int, d_cont: int
    ) -> "MixedState":
        """Allocate an all-zero state with the given layout."""
        return cls(
            disc=torch.zeros(*batch_shape, d_disc, dtype=torch.long),
            cont=torch.zeros(*batch_shape, d_cont, dtype=DTYPE),
        )

    @classmethod
    def cat(cls, states: Sequence["MixedState"], dim: int = 0) -> "MixedState":
        return cls(
            disc=torch.cat([s.disc for s in states], dim=dim),
            cont=torch.cat([s.cont for s in states], dim=dim),
        )

    @property
    def batch_shape(self) -> torch.Size:
        return self.disc.shape[:-1]

    @property
    def d_disc(self) -> int:
        return self.disc.shape[-1]

    @property
    def d_cont(self) -> int:
        return self.cont.shape[-1]

    def __len__(self) -> int:
        return self.batch_shape[0]

    def __getitem__(self, index) -> "MixedState":
        return MixedState(disc=self.disc[index], cont=self.cont[index])

    def unsqueeze(self, dim: int) -> "MixedState":
        """Insert a batch axis; ``dim`` indexes batch axes only."""
        if dim < 0:
            dim = len(self.batch_shape) + 1 + dim
        return MixedState(self.disc.unsqueeze(dim), self.cont.unsqueeze(dim))

    def expand(self, *batch_shape: int) -> "MixedState":
        return MixedState(
            disc=self.disc.expand(*batch_shape, self.d_disc),
            cont=self.cont.expand(*batch_shape, self.d_cont),
        )

    def reshape(self, *batch_shape: int) -> "MixedState":
        return MixedState(
            disc=self.disc.reshape(*batch_shape, self.d_disc),
            cont=self.cont.reshape(*batch_shape, self.d_cont),
        )

    def flatten(self) -> "MixedState":
        """Collapse all batch axes into one."""
        return self.reshape(-1)

    def clone(self) -> "MixedState":
        return MixedState(self.disc.clone(), self.cont.clone())

    def is_masked(self, mask_id: int) -> torch.Tensor:
        return self.disc == mask_id

    def equal(self, other: "MixedState") -> bool:
        return torch.equal(self.disc, other.disc) and torch.equal(
            self.cont, other.cont
        )

    def model_dump(self) -> Dict[str, Any]:
        """Convert the state to a dictionary.

        Returns:
            Dict[str, Any]: Dictionary representation of the state
        """
        return {"disc": self.disc.tolist(), "cont": self.cont.tolist()}


@dataclass
class GeneratorEstimate:
    """Linear parametrization F_t(x) of a flow + masked-jump generator.

    ``rates`` has shape ``(*batch, D_disc, V)``: the rate from the current token
    to every data token, nonzero only at masked positions. ``drift`` has shape
    ``(*batch, D_cont)``.
    """

    rates: torch.Tensor
    drift: torch.Tensor

    @classmethod
    def zeros(
        cls, batch_shape: Sequence[int], d_disc: int, vocab_size: int, d_cont: int
    ) -> "GeneratorEstimate":
        return cls(
            rates=torch.zeros(*batch_shape, d_disc, vocab_size, dtype=DTYPE),
            drift=torch.zeros(*batch_shape, d_cont, dtype=DTYPE),
        )

    @property
    def batch_shape(self) -> torch.Size:
        return self.drift.shape[:-1]

    def weighted_sum(self, weights: torch.Tensor) -> "GeneratorEstimate":
        """Contract the last batch axis (the sample axis) with ``weights``."""
        rates = (self.rates * weights[..., None, None]).sum(dim=-3)
        drift = (self.drift * weights[..., None]).sum(dim=-2)
        return GeneratorEstimate(rates=rates, drift=drift)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.rates).all() and torch.isfinite(self.drift).all())

    def model_dump(self) -> Dict[str, Any]:
        return {"rates": self.rates.tolist(), "drift": self.drift.tolist()}


class _SpecBase(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class IsingSpec(_SpecBase):
    """Periodic L x L Ising lattice with inverse temperature beta."""

    task: Literal["ising"] = "ising"
    L: int = Field(default=5, ge=2, description="Lattice side length")
    beta: float = Field(default=0.2, gt=0.0, description="Inverse temperature")
    J: float = Field(default=1.0, description="Interaction strength")
    mu: float = Field(default=0.0, description="External field (magnetic moment)")


class GBRBMSpec(_SpecBase):
    """Gaussian-Bernoulli RBM with two continuous and three binary units."""

    task: Literal["gbrbm"] = "gbrbm"
    a: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    b: List[float] = Field(default_factory=lambda: [-5.0, -5.0, -5.0])
    sigma: float = Field(default=2.0, gt=0.0, description="Scalar covariance Σ")
    W: List[List[float]] = Field(
        default_factory=lambda: [[10.0, 0.0, 10.0], [0.0, 10.0, 0.0]]
    )

    @model_validator(mode="after")
    def check_shapes(self) -> "GBRBMSpec":
        if len(self.W) != len(self.a) or any(len(row) != len(self.b) for row in self.W):
            raise ValueError(
                f"W must be {len(self.a)}x{len(self.b)} to match a and b"
            )
        return self


class JointDW4Spec(_SpecBase):
    """Four typed particles in 2D with type-dependent double-well pair terms."""

    task: Literal["jointdw4"] = "jointdw4"
    a: List[List[float]] = Field(default_factory=lambda: [[0.0, 0.0], [0.0, 0.0]])
    b: List[List[float]] = Field(
        default_factory=lambda: [[-3.0, -2.5], [-2.5, -2.8]]
    )
    c: List[List[float]] = Field(default_factory=lambda: [[0.8, 0.4], [0.4, 0.6]])
    tau: float = Field(default=1.0, gt=0.0)
    d0: float = Field(default=2.0)
    n_particles: int = Field(default=4, ge=2)

    @field_validator("a", "b", "c")
    @classmethod
    def check_symmetric(cls, v: List[List[float]]) -> List[List[float]]:
        if len(v) != 2 or any(len(row) != 2 for row in v):
            raise ValueError("interaction tables must be 2x2")
        if v[0][1] != v[1][0]:
            raise ValueError("interaction tables must be symmetric")
        return v


class JointMoGSpec(_SpecBase):
    """Product of d one-dimensional two-mode mixtures coupled to sign bits."""

    task: Literal["jointmog"] = "jointmog"
    d: int = Field(default=10, ge=1, description="Number of (x_i, b_i) pairs")
    sigma: float = Field(default=0.3, gt=0.0)


EnergySpec = Annotated[
    Union[IsingSpec, GBRBMSpec, JointDW4Spec, JointMoGSpec],
    Field(discriminator="task"),
]


class RunManifest(BaseModel):
    """Auditable record of one training run, written before any work starts."""

    config: Dict[str, Any]
    seed: int
    version: str
    status: str = "running"
    metrics_path: Optional[str] = None
    checkpoint_paths: List[str] = Field(default_factory=list)
    sample_paths: List[str] = Field(default_factory=list)
