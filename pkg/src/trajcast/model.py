"""The full forecaster: parameter construction, batch preparation, encoding,
and checkpoint round-tripping.

Parameter names carry their group: ``theta/*`` condition the latent prior
and the backbone, ``phi/*`` belong to the recognition side (used only at
training time), ``psi/*`` to the decoder. Network inputs are centered at
the modeled agent's current position (when enabled) and standardized with
per-class statistics computed from the training split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, check_config_match
from .config import ModelConfig
from .data_io import StandardizationStats
from .decoder import DecoderParams, init_decoder, rollout_generative
from .encoder import (
    EncoderParams,
    assemble_backbone,
    encode_edges,
    encode_history,
    encode_map,
    encode_node_future,
    encode_robot_future,
    init_encoder,
)
from .latent import DiscreteDistribution, prior_logits, recognition_logits
from .layers import DenseParams, init_dense
from .scene import POS, VEL, PredictionInstance


@dataclass
class Batch:
    """Batched, standardized model inputs for instances sharing one horizon."""

    size: int
    horizon: int
    dt: float
    class_names: list[str]
    history: np.ndarray  # [B, L, 6]
    history_mask: np.ndarray  # [B, L]
    edge_inputs: dict[str, np.ndarray]  # type -> [B, L, 12]
    edge_masks: dict[str, np.ndarray]  # type -> [B]
    map_crops: Optional[np.ndarray]  # [B, S, S, C]
    robot_plan: Optional[np.ndarray]  # [B, T, 6]
    future_positions: Optional[np.ndarray]  # [B, T, 2] standardized
    gt_velocities: Optional[np.ndarray]  # [B, T, 2] physical
    teacher_inputs: Optional[np.ndarray]  # [B, T, 2] standardized feedback stream
    current_velocity_std: np.ndarray  # [B, 2]
    current_position: np.ndarray  # [B, 2]
    velocity_mean: np.ndarray  # [B, 2] per-class standardization constants
    velocity_std: np.ndarray  # [B, 2]


class ForecastModel:
    def __init__(self, config: ModelConfig, stats: Optional[StandardizationStats] = None):
        self.config = config
        self.stats = stats
        self.params: dict[str, Tensor] = {}
        self.encoder: Optional[EncoderParams] = None
        self.prior_head: Optional[DenseParams] = None
        self.recognition_head: Optional[DenseParams] = None
        self.decoder: Optional[DecoderParams] = None
        self.iteration = 0

    # -- construction -----------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   stats: Optional[StandardizationStats] = None) -> "ForecastModel":
        model = cls(config, stats)
        rng = np.random.default_rng(seed)
        store = model.params
        model.encoder = init_encoder(store, config, rng)
        x_width = config.backbone_width
        model.prior_head = init_dense(store, "theta/prior", x_width, config.latent_classes, rng)
        model.recognition_head = init_dense(
            store, "phi/recognition", x_width + 2 * config.future_hidden,
            config.latent_classes, rng,
        )
        model.decoder = init_decoder(store, config, rng)
        return model

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        unknown = set(arrays) - set(self.params)
        if unknown:
            raise CheckpointError(f"unknown parameter name {sorted(unknown)[0]!r}")
        missing = set(self.params) - set(arrays)
        if missing:
            raise CheckpointError(f"missing parameter {sorted(missing)[0]!r}")
        for name, arr in arrays.items():
            p = self.params[name]
            if p.data.shape != np.asarray(arr).shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {np.asarray(arr).shape}, "
                    f"model {p.data.shape}"
                )
            p.data = np.array(arr, dtype=ad.default_dtype())

    def to_checkpoint(self, seed: Optional[int] = None) -> Checkpoint:
        arrays = self.param_arrays()
        if self.stats is not None:
            arrays.update(self.stats.to_arrays())
        return Checkpoint(
            config=self.config.to_dict(),
            arrays=arrays,
            iteration=self.iteration,
            seed=seed,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint,
                        expected_config: Optional[ModelConfig] = None) -> "ForecastModel":
        if expected_config is not None:
            check_config_match(expected_config.to_dict(), ckpt.config)
        config = ModelConfig.from_dict(ckpt.config)
        model = cls.initialize(config, seed=0)
        params = {k: v for k, v in ckpt.arrays.items() if not k.startswith("stats/")}
        stats_arrays = {k: v for k, v in ckpt.arrays.items() if k.startswith("stats/")}
        model.load_arrays(params)
        if stats_arrays:
            model.stats = StandardizationStats.from_named_arrays(stats_arrays)
        model.iteration = ckpt.iteration
        return model

    # -- input preparation --------------------------------------------------

    def _std(self, x: np.ndarray, class_name: str, dims: slice | None = None) -> np.ndarray:
        if self.stats is None:
            raise RuntimeError("model has no standardization stats; train or load first")
        return self.stats.apply(x, class_name, dims=dims)

    def _center_states(self, states: np.ndarray, origin: np.ndarray) -> np.ndarray:
        out = np.array(states, dtype=np.float64)
        if self.config.center_inputs:
            out[..., 0:2] = out[..., 0:2] - origin
        return out

    def prepare_batch(self, instances: Sequence[PredictionInstance],
                      require_gt: bool = False) -> Batch:
        if not instances:
            raise ValueError("cannot prepare an empty batch")
        cfg = self.config
        horizons = {cfg.classes[i.class_name].prediction_horizon for i in instances}
        if len(horizons) != 1:
            raise ValueError(f"batch mixes prediction horizons {sorted(horizons)}")
        horizon = horizons.pop()
        dts = {round(i.dt, 9) for i in instances}
        if len(dts) != 1:
            raise ValueError("batch mixes timestep durations")
        dt = float(dts.pop())
        bsz = len(instances)
        length = max(len(i.history) for i in instances)

        history = np.zeros((bsz, length, cfg.state_dim))
        mask = np.zeros((bsz, length))
        cur_vel_std = np.zeros((bsz, 2))
        cur_pos = np.zeros((bsz, 2))
        vel_mean = np.zeros((bsz, 2))
        vel_std = np.zeros((bsz, 2))
        for b, inst in enumerate(instances):
            h = len(inst.history)
            centered = self._center_states(inst.history, inst.current_position)
            history[b, length - h :] = self._std(centered, inst.class_name)
            mask[b, length - h :] = 1.0
            cur_pos[b] = inst.current_position
            cur_vel_std[b] = self._std(inst.current_velocity, inst.class_name, dims=VEL)
            if self.stats is not None:
                vel_mean[b] = self.stats.mean[inst.class_name][VEL]
                vel_std[b] = self.stats.std[inst.class_name][VEL]

        edge_inputs: dict[str, np.ndarray] = {}
        edge_masks: dict[str, np.ndarray] = {}
        if cfg.edge_encoding:
            for src, dst in cfg.edge_types:
                key = f"{src}->{dst}"
                seq = np.zeros((bsz, length, 2 * cfg.state_dim))
                present = np.zeros(bsz)
                for b, inst in enumerate(instances):
                    neighbors = inst.neighbors_by_edge_type.get(key, [])
                    if not neighbors or inst.class_name != dst:
                        continue
                    h = len(inst.history)
                    total = np.zeros((h, cfg.state_dim))
                    for nbr in neighbors:
                        centered = self._center_states(nbr, inst.current_position)
                        std = self._std(centered, src)
                        std[~np.isfinite(nbr).all(axis=1)] = 0.0
                        total += std
                    seq[b, length - h :, : cfg.state_dim] = total
                    seq[b, length - h :, cfg.state_dim :] = history[b, length - h :]
                    present[b] = 1.0
                edge_inputs[key] = seq
                edge_masks[key] = present

        map_crops = None
        if cfg.map_encoding:
            crops = []
            for inst in instances:
                if inst.map_crop is None:
                    raise ValueError(
                        f"map encoding is enabled but instance {inst.agent_id!r} has no crop"
                    )
                crops.append(np.asarray(inst.map_crop, dtype=np.float64))
            map_crops = np.stack(crops)

        robot_plan = None
        if cfg.robot_encoding:
            plans = []
            for inst in instances:
                if inst.ego_future is None:
                    raise ValueError(
                        f"ego-plan conditioning is enabled but instance {inst.agent_id!r} "
                        "carries no plan"
                    )
                centered = self._center_states(inst.ego_future[:horizon], inst.current_position)
                plans.append(self._std(centered, inst.ego_class))
            robot_plan = np.stack(plans)

        future_positions = gt_velocities = teacher = None
        has_gt = all(inst.gt_future is not None for inst in instances)
        if require_gt and not has_gt:
            raise ValueError("batch requires ground-truth futures but some are missing")
        if has_gt:
            future_positions = np.zeros((bsz, horizon, 2))
            gt_velocities = np.zeros((bsz, horizon, 2))
            teacher = np.zeros((bsz, horizon, 2))
            for b, inst in enumerate(instances):
                gt = np.asarray(inst.gt_future, dtype=np.float64)
                if len(gt) != horizon:
                    raise ValueError(
                        f"instance {inst.agent_id!r} has gt length {len(gt)}, expected {horizon}"
                    )
                centered = gt - (inst.current_position if cfg.center_inputs else 0.0)
                future_positions[b] = self._std(centered, inst.class_name, dims=POS)
                prev = np.vstack([inst.current_position, gt[:-1]])
                gt_velocities[b] = (gt - prev) / dt
                vel_stream = np.vstack([inst.current_velocity, gt_velocities[b, :-1]])
                teacher[b] = self._std(vel_stream, inst.class_name, dims=VEL)

        return Batch(
            size=bsz,
            horizon=horizon,
            dt=dt,
            class_names=[i.class_name for i in instances],
            history=history,
            history_mask=mask,
            edge_inputs=edge_inputs,
            edge_masks=edge_masks,
            map_crops=map_crops,
            robot_plan=robot_plan,
            future_positions=future_positions,
            gt_velocities=gt_velocities,
            teacher_inputs=teacher,
            current_velocity_std=cur_vel_std,
            current_position=cur_pos,
            velocity_mean=vel_mean,
            velocity_std=vel_std,
        )

    # -- encoding ------------------------------------------------------------

    def encode_batch(self, batch: Batch) -> Tensor:
        cfg = self.config
        components: dict[str, Tensor] = {}
        hist = encode_history(self.encoder.history, batch.history, batch.history_mask)
        components["history"] = hist
        if cfg.edge_encoding:
            components["edges"] = encode_edges(
                self.encoder, batch.edge_inputs, batch.edge_masks, batch.history_mask, hist
            )
        if cfg.map_encoding:
            components["map"] = encode_map(self.encoder, batch.map_crops, cfg.map_strides)
        if cfg.robot_encoding:
            components["robot_future"] = encode_robot_future(self.encoder, batch.robot_plan)
        return assemble_backbone(cfg, components).values

    def encode_future_batch(self, batch: Batch) -> Tensor:
        if batch.future_positions is None:
            raise ValueError("batch has no ground-truth futures to encode")
        return encode_node_future(self.encoder, batch.future_positions)

    def prior_logits_batch(self, e_x: Tensor) -> Tensor:
        return prior_logits(e_x, self.prior_head)

    def recognition_logits_batch(self, e_x: Tensor, e_y: Tensor) -> Tensor:
        return recognition_logits(e_x, e_y, self.recognition_head)

    # -- single-instance inference --------------------------------------------

    def prior_distribution(self, instance: PredictionInstance) -> DiscreteDistribution:
        with ad.no_grad():
            batch = self.prepare_batch([instance])
            logits = self.prior_logits_batch(self.encode_batch(batch))
        return DiscreteDistribution(logits.data[0])

    def rollout_instance(self, instance: PredictionInstance, z_onehot: np.ndarray,
                         rng: np.random.Generator, mode_flag: bool = False):
        cfg = self.config
        with ad.no_grad():
            batch = self.prepare_batch([instance])
            e_x = self.encode_batch(batch).data
        rows = len(z_onehot)
        e_x_rows = np.repeat(e_x, rows, axis=0)
        first_vel = np.repeat(batch.current_velocity_std, rows, axis=0)

        def standardize_velocity(v: np.ndarray) -> np.ndarray:
            return self._std(v, instance.class_name, dims=VEL)

        return rollout_generative(
            self.decoder, cfg, e_x_rows, z_onehot, first_vel,
            cfg.classes[instance.class_name].prediction_horizon,
            rng, standardize_velocity, mode_flag=mode_flag,
        )
