"""Model and training configuration with dict round-tripping for checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .maps import CropSpec
from .scene import SemanticClass, default_class_table


@dataclass
class ModelConfig:
    """Architecture hyperparameters and the semantic class table.

    The backbone is assembled from up to four components in a fixed order:
    history (always on), edge influence, map features, and the ego-agent's
    future plan. Disabling a component removes its span from the backbone
    entirely rather than zeroing it.
    """

    classes: dict[str, SemanticClass] = field(default_factory=default_class_table)
    state_dim: int = 6
    history_hidden: int = 32
    edge_hidden: int = 8
    attention_hidden: int = 16
    future_hidden: int = 32
    robot_hidden: int = 32
    latent_classes: int = 25
    gru_hidden: int = 512
    gmm_components: int = 16
    sigma_min: float = 1e-3
    rho_max: float = 0.999
    edge_encoding: bool = True
    map_encoding: bool = False
    robot_encoding: bool = False
    map_channels: tuple[int, ...] = (4, 8, 8)
    map_kernels: tuple[int, ...] = (5, 5, 5)
    map_strides: tuple[int, ...] = (2, 3, 2)
    map_dense: int = 512
    map_raster_channels: int = 1
    crop: CropSpec = field(default_factory=CropSpec)
    min_history: int = 2
    center_inputs: bool = True

    def __post_init__(self):
        if self.latent_classes < 2:
            raise ValueError("latent_classes must be >= 2")
        if self.gmm_components < 1:
            raise ValueError("gmm_components must be >= 1")
        if not (len(self.map_channels) == len(self.map_kernels) == len(self.map_strides)):
            raise ValueError("map_channels/map_kernels/map_strides must have equal length")
        if not 0.0 < self.rho_max < 1.0:
            raise ValueError("rho_max must lie in (0, 1)")

    @property
    def edge_types(self) -> list[tuple[str, str]]:
        names = sorted(self.classes)
        return [(src, dst) for dst in names for src in names]

    def backbone_layout(self) -> list[tuple[str, int]]:
        layout = [("history", self.history_hidden)]
        if self.edge_encoding:
            layout.append(("edges", self.edge_hidden))
        if self.map_encoding:
            layout.append(("map", self.map_dense))
        if self.robot_encoding:
            layout.append(("robot_future", 2 * self.robot_hidden))
        return layout

    @property
    def backbone_width(self) -> int:
        return sum(width for _, width in self.backbone_layout())

    def conv_output_size(self) -> int:
        side = self.crop.size
        for k, s in zip(self.map_kernels, self.map_strides):
            if side < k:
                raise ValueError(
                    f"map crop of {self.crop.size} cells is too small for kernels "
                    f"{self.map_kernels} with strides {self.map_strides}"
                )
            side = (side - k) // s + 1
        return side * side * self.map_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = {name: asdict(c) for name, c in self.classes.items()}
        d["crop"] = asdict(self.crop)
        for key in ("map_channels", "map_kernels", "map_strides"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["classes"] = {name: SemanticClass(**c) for name, c in d["classes"].items()}
        d["crop"] = CropSpec(**d["crop"])
        for key in ("map_channels", "map_kernels", "map_strides"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainConfig:
    """Optimization schedule: iteration budget, batch, and annealing shape.

    ``beta_max`` and ``beta_rate`` default to None and are resolved at train
    time: beta_max rises to 5.0 when map encoding is active, and the rate is
    set so the 10%..90% stretch of the sigmoid spans the middle half of
    training.
    """

    iterations: int = 4000
    batch_size: int = 32
    learning_rate: float = 1e-3
    grad_clip: float = 1.0
    beta_min: float = 0.05
    beta_max: Optional[float] = None
    beta_midpoint: Optional[float] = None  # iterations; default 40% of budget
    beta_rate: Optional[float] = None
    alpha: float = 1.0
    teacher_forcing: bool = True
    seed: int = 0
    pretrain_iterations: int = 500
    pretrain_learning_rate: float = 1e-3
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta_max is not None and self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")

    def resolved(self, map_encoding: bool) -> "ResolvedBetaSchedule":
        beta_max = self.beta_max if self.beta_max is not None else (5.0 if map_encoding else 1.0)
        midpoint = self.beta_midpoint if self.beta_midpoint is not None else 0.4 * self.iterations
        # logit(0.9) - logit(0.1) = 2 ln 9; spread it over half the budget
        rate = self.beta_rate if self.beta_rate is not None else (4.0 * np.log(9.0) / self.iterations)
        return ResolvedBetaSchedule(self.beta_min, beta_max, midpoint, rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class ResolvedBetaSchedule:
    beta_min: float
    beta_max: float
    midpoint: float
    rate: float
