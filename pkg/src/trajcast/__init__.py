"""Multi-agent trajectory forecasting with directed scene graphs, a
discrete-latent conditional VAE, and a mixture-density recurrent decoder."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .scene import (
    AgentNode,
    DirectedEdge,
    PredictionInstance,
    Scene,
    SemanticClass,
    build_edges,
    default_class_table,
    derive_states,
    slice_instances,
)

__all__ = [
    "AgentNode",
    "DirectedEdge",
    "ModelConfig",
    "PredictionInstance",
    "Scene",
    "SemanticClass",
    "TrainConfig",
    "build_edges",
    "default_class_table",
    "derive_states",
    "slice_instances",
]
