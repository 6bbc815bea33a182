"""Model assembly: the channel-specific prototype network and its baselines.

Three kinds share the encoder implementation:

* ``proto_channel``: each channel slice runs through the shared encoder; each
  channel owns a bank of class-specific prototypes; max similarities are
  concatenated channel-major into the zero-bias head.
* ``proto_joint``: the encoder consumes all channels at once and one joint
  bank of prototypes spans the combined embedding.
* ``standard_nn``: the same shared per-channel encoder, but flattened
  embeddings feed a standard biased linear classifier (no prototypes). Its
  encoder weights are the source for transfer experiments.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .classifier import ZeroBiasHead
from .encoder import ConfigError, EncoderConfig, SharedEncoder, StageConfig, init_encoder
from .prototypes import DEFAULT_EPSILON, PrototypeBank

MODEL_KINDS = ("standard_nn", "proto_joint", "proto_channel")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    encoder: EncoderConfig  # in_channels reflects the kind (1 or C)
    num_channels: int  # channels of the input data
    num_classes: int
    per_class: int = 5
    location_scaling: bool = True
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        expected_in = self.num_channels if self.kind == "proto_joint" else 1
        if self.encoder.in_channels != expected_in:
            raise ConfigError(
                f"{self.kind} needs encoder in_channels={expected_in}, "
                f"got {self.encoder.in_channels}"
            )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder"]["stages"] = [dataclasses.asdict(s) for s in self.encoder.stages]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        enc = dict(raw["encoder"])
        enc["stages"] = tuple(StageConfig(**s) for s in enc["stages"])
        enc["input_hw"] = tuple(enc["input_hw"])
        enc["embedding_hw"] = tuple(enc["embedding_hw"])
        return cls(**{**raw, "encoder": EncoderConfig(**enc)})


class ForwardOutputs(NamedTuple):
    """Intermediates of one forward pass; prototype fields are None for standard_nn."""

    embeddings: torch.Tensor  # (B, C_model, h, w, d); C_model = 1 for proto_joint
    similarities: torch.Tensor | None  # (B, C_model, N, h, w)
    distances: torch.Tensor | None  # (B, C_model, N, h, w)
    max_sims: torch.Tensor | None  # (B, A)
    logits: torch.Tensor  # (B, K)


class _ModelBase(nn.Module):
    model_config: ModelConfig

    @property
    def kind(self) -> str:
        return self.model_config.kind

    @property
    def num_classes(self) -> int:
        return self.model_config.num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_full(x, training=False).logits


class ChannelProtoModel(_ModelBase):
    def __init__(self, config: ModelConfig, encoder: SharedEncoder, bank: PrototypeBank, head: ZeroBiasHead):
        super().__init__()
        self.model_config = config
        self.encoder = encoder
        self.bank = bank
        self.head = head

    def embed(self, x: torch.Tensor, training: bool = False) -> torch.Tensor:
        return self.encoder.encode_all_channels(x, training=training)

    def forward_full(self, x: torch.Tensor, training: bool = False) -> ForwardOutputs:
        emb = self.embed(x, training=training)
        sims, dists = self.bank.similarity(emb)
        b = sims.shape[0]
        max_sims = sims.reshape(b, self.bank.total, -1).amax(dim=-1)
        return ForwardOutputs(emb, sims, dists, max_sims, self.head(max_sims))

    def stage1_parameters(self) -> list[nn.Parameter]:
        params = list(self.encoder.parameters()) + [self.bank.phi]
        if self.bank.location_scaling:
            params.append(self.bank.omega)
        return params

    def stage3_parameters(self) -> list[nn.Parameter]:
        return list(self.head.parameters())


class JointProtoModel(ChannelProtoModel):
    def embed(self, x: torch.Tensor, training: bool = False) -> torch.Tensor:
        out = self.encoder(x.permute(0, 3, 1, 2), training=training)
        return out.permute(0, 2, 3, 1).unsqueeze(1)


class StandardModel(_ModelBase):
    """Shared per-channel encoder, flattened embeddings, biased linear head."""

    def __init__(self, config: ModelConfig, encoder: SharedEncoder, head: nn.Linear):
        super().__init__()
        self.model_config = config
        self.encoder = encoder
        self.head = head

    def embed(self, x: torch.Tensor, training: bool = False) -> torch.Tensor:
        return self.encoder.encode_all_channels(x, training=training)

    def forward_full(self, x: torch.Tensor, training: bool = False) -> ForwardOutputs:
        emb = self.embed(x, training=training)
        logits = self.head(emb.reshape(emb.shape[0], -1))
        return ForwardOutputs(emb, None, None, None, logits)

    def stage1_parameters(self) -> list[nn.Parameter]:
        return list(self.parameters())

    def stage3_parameters(self) -> list[nn.Parameter]:
        return []


def build_model(config: ModelConfig, seed: int) -> _ModelBase:
    """Deterministic construction; encoder, bank, and head draw from seed, seed+1, seed+2."""
    encoder = init_encoder(config.encoder, seed)
    h, w = config.encoder.embedding_hw
    d = config.encoder.embedding_dim
    if config.kind == "standard_nn":
        fan_in = config.num_channels * h * w * d
        head = nn.Linear(fan_in, config.num_classes, bias=True)
        gen = torch.Generator().manual_seed(seed + 2)
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            head.weight.uniform_(-bound, bound, generator=gen)
            head.bias.uniform_(-bound, bound, generator=gen)
        return StandardModel(config, encoder, head)

    bank_channels = 1 if config.kind == "proto_joint" else config.num_channels
    bank = PrototypeBank(
        num_channels=bank_channels,
        num_classes=config.num_classes,
        per_class=config.per_class,
        embedding_shape=(h, w, d),
        location_scaling=config.location_scaling,
        epsilon=config.epsilon,
        seed=seed + 1,
    )
    head = ZeroBiasHead(bank.total, config.num_classes, seed=seed + 2)
    cls = JointProtoModel if config.kind == "proto_joint" else ChannelProtoModel
    return cls(config, encoder, bank, head)


def make_model_config(
    kind: str,
    input_hw: tuple[int, int],
    num_channels: int,
    num_classes: int,
    encoder_channels: tuple[int, ...],
    embedding_hw: tuple[int, int],
    encoder_pools: tuple[int, ...] | None = None,
    per_class: int = 5,
    location_scaling: bool = True,
    epsilon: float = DEFAULT_EPSILON,
    negative_slope: float = 0.01,
    dropout: float = 0.2,
) -> ModelConfig:
    """Convenience builder using the default stage geometry."""
    if encoder_pools is None:
        encoder_pools = tuple(2 for _ in encoder_channels)
    encoder = EncoderConfig(
        input_hw=input_hw,
        stages=tuple(
            StageConfig(out_channels=c, pool=p) for c, p in zip(encoder_channels, encoder_pools)
        ),
        embedding_hw=embedding_hw,
        in_channels=num_channels if kind == "proto_joint" else 1,
        negative_slope=negative_slope,
        dropout=dropout,
    )
    return ModelConfig(
        kind=kind,
        encoder=encoder,
        num_channels=num_channels,
        num_classes=num_classes,
        per_class=per_class,
        location_scaling=location_scaling,
        epsilon=epsilon,
    )
