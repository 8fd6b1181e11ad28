"""Backbone encoders: agent history, typed edge influence, local map,
ego-agent motion plan, and the ground-truth-future encoder used only by the
recognition network at training time.

All encoders run over batched arrays with per-instance validity masks, so
variable-length histories share one unrolled pass. Edge LSTM weights are
shared across every edge instance of the same (source class -> target
class) type; per-type encodings are blended by additive attention with the
node's own history encoding as the query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import (
    AttentionParams,
    DenseParams,
    LstmParams,
    additive_attention,
    bidirectional_encode,
    conv2d,
    dense,
    init_attention,
    init_conv,
    init_dense,
    init_lstm,
    lstm_encode,
)
from .scene import edge_type_name


@dataclass
class BackboneVector:
    """Encoded node representation plus the span each component occupies."""

    values: Tensor  # [B, X]
    layout: list[tuple[str, int]]

    @property
    def width(self) -> int:
        return sum(w for _, w in self.layout)


@dataclass
class EncoderParams:
    history: LstmParams
    edges: dict[str, LstmParams]
    edge_attention: Optional[AttentionParams]
    map_convs: Optional[list[DenseParams]]
    map_dense: Optional[DenseParams]
    robot_fwd: Optional[LstmParams]
    robot_bwd: Optional[LstmParams]
    future_fwd: LstmParams
    future_bwd: LstmParams


def init_encoder(store: dict[str, Tensor], config: ModelConfig,
                 rng: np.random.Generator) -> EncoderParams:
    d = config.state_dim
    history = init_lstm(store, "theta/history", d, config.history_hidden, rng)
    edges: dict[str, LstmParams] = {}
    edge_attention = None
    if config.edge_encoding:
        for pair in config.edge_types:
            name = edge_type_name(pair)
            edges[name] = init_lstm(store, f"theta/edge/{name}", 2 * d, config.edge_hidden, rng)
        edge_attention = init_attention(
            store, "theta/edge_attention", config.history_hidden, config.edge_hidden,
            config.attention_hidden, rng,
        )
    map_convs = map_dense = None
    if config.map_encoding:
        map_convs = []
        in_ch = config.map_raster_channels
        for i, (out_ch, kernel) in enumerate(zip(config.map_channels, config.map_kernels)):
            map_convs.append(init_conv(store, f"theta/map/conv{i}", in_ch, out_ch, kernel, rng))
            in_ch = out_ch
        map_dense = init_dense(store, "theta/map/dense", config.conv_output_size(),
                               config.map_dense, rng)
    robot_fwd = robot_bwd = None
    if config.robot_encoding:
        robot_fwd = init_lstm(store, "theta/robot/fwd", d, config.robot_hidden, rng)
        robot_bwd = init_lstm(store, "theta/robot/bwd", d, config.robot_hidden, rng)
    future_fwd = init_lstm(store, "phi/future/fwd", 2, config.future_hidden, rng)
    future_bwd = init_lstm(store, "phi/future/bwd", 2, config.future_hidden, rng)
    return EncoderParams(history, edges, edge_attention, map_convs, map_dense,
                         robot_fwd, robot_bwd, future_fwd, future_bwd)


def encode_history(params: LstmParams, history: np.ndarray | Tensor,
                   mask: np.ndarray | None = None) -> Tensor:
    """Final hidden state of the history LSTM over standardized states."""
    history = ad.as_tensor(history)
    if history.ndim != 3 or history.shape[1] == 0:
        raise ValueError(f"history must be a non-empty [B, L, D] batch, got {history.shape}")
    return lstm_encode(history, params, mask=mask)


def encode_edges(
    params: EncoderParams,
    edge_inputs: dict[str, np.ndarray | Tensor],
    edge_masks: dict[str, np.ndarray],
    history_mask: np.ndarray | None,
    query: Tensor,
) -> Tensor:
    """Blend per-edge-type influence encodings into one vector.

    ``edge_inputs[type]`` is [B, L, 2D]: the element-wise sum of that type's
    standardized neighbor states concatenated with the modeled node's own
    states per timestep. ``edge_masks[type]`` is a [B] 0/1 indicator of
    whether the instance has any neighbor of that type. Instances with no
    neighbors at all get a zero influence vector.
    """
    names = sorted(params.edges)
    if not names:
        raise ValueError("edge encoding is disabled in this model")
    bsz = query.shape[0]
    encodings = []
    presence = np.zeros((bsz, len(names)))
    for i, name in enumerate(names):
        mask_b = edge_masks.get(name)
        presence[:, i] = 0.0 if mask_b is None else np.asarray(mask_b, dtype=float)
        seq = edge_inputs.get(name)
        if seq is None:
            width = params.edges[name].hidden
            encodings.append(Tensor(np.zeros((bsz, width))))
        else:
            encodings.append(lstm_encode(ad.as_tensor(seq), params.edges[name],
                                         mask=history_mask))
    keys = ad.concat([ad.reshape(e, (bsz, 1, e.shape[-1])) for e in encodings], axis=1)
    context, _ = additive_attention(query, keys, params.edge_attention, mask=presence)
    return context


def encode_map(params: EncoderParams, crops: np.ndarray | Tensor,
               strides: tuple[int, ...]) -> Tensor:
    """Conv stack over [B, S, S, C] crops, flattened into a dense feature.

    tanh activations throughout: smooth everywhere, so occupancy crops that
    are mostly zeros still propagate gradients into the filters.
    """
    x = ad.as_tensor(crops)
    for conv, stride in zip(params.map_convs, strides):
        x = conv2d(x, conv, stride, activation="tanh")
    flat = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
    return dense(flat, params.map_dense, activation="tanh")


def encode_robot_future(params: EncoderParams, plan: np.ndarray | Tensor) -> Tensor:
    plan = ad.as_tensor(plan)
    if plan.ndim != 3 or plan.shape[1] == 0:
        raise ValueError("ego plan must be a non-empty [B, T, D] batch")
    return bidirectional_encode(plan, params.robot_fwd, params.robot_bwd)


def encode_node_future(params: EncoderParams, future_positions: np.ndarray | Tensor) -> Tensor:
    fut = ad.as_tensor(future_positions)
    if fut.ndim != 3 or fut.shape[1] == 0:
        raise ValueError("ground-truth future is required for the recognition encoder")
    return bidirectional_encode(fut, params.future_fwd, params.future_bwd)


def assemble_backbone(config: ModelConfig, components: dict[str, Tensor]) -> BackboneVector:
    """Concatenate the present components in the fixed layout order."""
    layout = config.backbone_layout()
    parts = []
    for name, width in layout:
        if name not in components:
            raise ValueError(f"backbone component {name!r} is enabled but missing")
        part = components[name]
        if part.shape[-1] != width:
            raise ValueError(
                f"component {name!r} has width {part.shape[-1]}, layout expects {width}"
            )
        parts.append(part)
    extra = set(components) - {name for name, _ in layout}
    if extra:
        raise ValueError(f"components {sorted(extra)} are not enabled in this config")
    return BackboneVector(values=ad.concat(parts, axis=-1), layout=layout)
