"""Channel-specific prototype networks for multi-channel raster classification."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_experiment_config, preset_path
from .explain import (
    channel_weight_summary,
    local_explanation,
    prototype_scores,
    receptive_field,
    top_prototype_frequency,
)
from .losses import LossConfig
from .model import ModelConfig, build_model, make_model_config
from .report import ExplanationBundle, render_reports
from .training import (
    Metrics,
    TrainConfig,
    TrainResult,
    cyclic_adjacency,
    evaluate,
    train,
    train_transfer,
)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "ExplanationBundle",
    "LossConfig",
    "Metrics",
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "channel_weight_summary",
    "cyclic_adjacency",
    "evaluate",
    "load_checkpoint",
    "load_experiment_config",
    "local_explanation",
    "make_model_config",
    "preset_path",
    "prototype_scores",
    "receptive_field",
    "render_reports",
    "save_checkpoint",
    "top_prototype_frequency",
    "train",
    "train_transfer",
]
