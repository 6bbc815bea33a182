"""Experiment configuration files: flat ``key = value`` text.

Every key is optional except where noted; unknown keys are rejected by name.
``encoder_pools`` lets a preset disable pooling in chosen stages (value 1) so
shallow inputs still reach the configured embedding height/width.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data.manifest import parse_keyvalue
from .losses import LossConfig
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _parse_hw(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


_SCHEMA: dict[str, type | object] = {
    "model_kind": str,
    "encoder_channels": _parse_ints,
    "encoder_pools": _parse_ints,
    "embedding_hw": _parse_hw,
    "per_class": int,
    "location_scaling": _parse_bool,
    "cluster_coefficient": float,
    "separation_coefficient": float,
    "diversity_coefficient": float,
    "diversity_threshold": float,
    "l1_coefficient": float,
    "batch_size": int,
    "learning_rate": float,
    "projection_period": int,
    "max_cycles": int,
    "final_stage3_epochs": int,
    "early_stop_cycles": int,
    "seed": int,
    "dropout": float,
    "negative_slope": float,
    "epsilon": float,
    "grad_clip": float,
    "transfer": str,
    "pretrained_checkpoint": str,
    "data": str,
    "out_dir": str,
    "top_k": int,
    "near_zero_threshold": float,
    "plus_minus_one": str,
}


@dataclass
class ExperimentConfig:
    train: TrainConfig
    data: str | None = None
    out_dir: str = "runs/experiment"
    top_k: int = 3
    near_zero_threshold: float = 1e-3
    plus_minus_one: str | None = None


def load_experiment_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse a config file, applying CLI overrides last. Unknown keys fail."""
    entries = parse_keyvalue(path)
    if overrides:
        entries.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(entries) - set(_SCHEMA))
    if unknown:
        raise ValueError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    parsed: dict[str, object] = {}
    for key, raw in entries.items():
        caster = _SCHEMA[key]
        try:
            parsed[key] = caster(raw)
        except ValueError as err:
            raise ValueError(f"{path}: bad value for {key!r}: {err}") from None

    loss = LossConfig(
        cluster=parsed.get("cluster_coefficient", 0.7),
        separation=parsed.get("separation_coefficient", 0.7),
        diversity=parsed.get("diversity_coefficient", 0.001),
        diversity_threshold=parsed.get("diversity_threshold", 0.001),
        l1=parsed.get("l1_coefficient", 0.01),
    )
    train_keys = dict(
        model_kind=parsed.get("model_kind", "proto_channel"),
        encoder_channels=parsed.get("encoder_channels", (8, 16, 32)),
        encoder_pools=parsed.get("encoder_pools"),
        embedding_hw=parsed.get("embedding_hw", (2, 2)),
        per_class=parsed.get("per_class", 5),
        location_scaling=parsed.get("location_scaling", True),
        loss=loss,
        batch_size=parsed.get("batch_size", 32),
        learning_rate=parsed.get("learning_rate", 0.001),
        projection_period=parsed.get("projection_period", 3),
        max_cycles=parsed.get("max_cycles", 40),
        final_stage3_epochs=parsed.get("final_stage3_epochs", 10),
        early_stop_cycles=parsed.get("early_stop_cycles", 8),
        seed=parsed.get("seed", 0),
        dropout=parsed.get("dropout", 0.2),
        negative_slope=parsed.get("negative_slope", 0.01),
        epsilon=parsed.get("epsilon", 1e-4),
        grad_clip=parsed.get("grad_clip", 5.0),
        transfer=parsed.get("transfer", "none"),
        pretrained_checkpoint=parsed.get("pretrained_checkpoint") or None,
    )
    return ExperimentConfig(
        train=TrainConfig(**train_keys),
        data=parsed.get("data"),
        out_dir=parsed.get("out_dir", "runs/experiment"),
        top_k=parsed.get("top_k", 3),
        near_zero_threshold=parsed.get("near_zero_threshold", 1e-3),
        plus_minus_one=parsed.get("plus_minus_one"),
    )


def preset_path(name: str) -> Path:
    """Path of a bundled preset such as ``mnist`` or ``mjo``."""
    path = Path(__file__).parent / "configs" / f"{name}.cfg"
    if not path.exists():
        available = sorted(p.stem for p in path.parent.glob("*.cfg"))
        raise FileNotFoundError(f"no bundled preset {name!r}; available: {available}")
    return path
