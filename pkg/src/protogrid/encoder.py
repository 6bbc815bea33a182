"""Shared convolutional encoder mapping one channel slice to an embedding grid.

Every stage is convolution -> leaky rectifier -> (dropout while training) ->
average pool; a final adaptive average pool guarantees the configured
embedding height/width for any input geometry. The same parameters are applied
to every channel slice of a sample, so embeddings of identical slices are
identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    """One conv/activation/pool stage."""

    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 2  # average-pool kernel and stride; 1 disables pooling


@dataclass(frozen=True)
class EncoderConfig:
    input_hw: tuple[int, int]
    stages: tuple[StageConfig, ...]
    embedding_hw: tuple[int, int]
    in_channels: int = 1
    negative_slope: float = 0.01
    dropout: float = 0.2

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("encoder needs at least one stage")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        validate_geometry(self)

    @property
    def embedding_dim(self) -> int:
        return self.stages[-1].out_channels

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        return (*self.embedding_hw, self.embedding_dim)

    @classmethod
    def from_channel_counts(
        cls,
        input_hw: tuple[int, int],
        out_channels: tuple[int, ...],
        embedding_hw: tuple[int, int],
        in_channels: int = 1,
        negative_slope: float = 0.01,
        dropout: float = 0.2,
    ) -> "EncoderConfig":
        """Default geometry: 3x3 convs, stride 1, padding 1, 2x2 average pools."""
        return cls(
            input_hw=input_hw,
            stages=tuple(StageConfig(c) for c in out_channels),
            embedding_hw=embedding_hw,
            in_channels=in_channels,
            negative_slope=negative_slope,
            dropout=dropout,
        )


def stage_output_shapes(config: EncoderConfig) -> list[tuple[int, int]]:
    """(H, W) after each stage, before the adaptive pool; raises ConfigError."""
    h, w = config.input_hw
    shapes = []
    for idx, stage in enumerate(config.stages):
        h_conv = (h + 2 * stage.padding - stage.kernel_size) // stage.stride + 1
        w_conv = (w + 2 * stage.padding - stage.kernel_size) // stage.stride + 1
        if h_conv < 1 or w_conv < 1:
            raise ConfigError(
                f"stage {idx}: kernel {stage.kernel_size} exceeds padded input {h}x{w}"
            )
        h, w = h_conv // stage.pool, w_conv // stage.pool
        if h < 1 or w < 1:
            raise ConfigError(f"stage {idx}: pool {stage.pool} empties the {h_conv}x{w_conv} grid")
        shapes.append((h, w))
    return shapes


def validate_geometry(config: EncoderConfig) -> None:
    shapes = stage_output_shapes(config)
    th, tw = config.embedding_hw
    if shapes[-1][0] < th or shapes[-1][1] < tw:
        raise ConfigError(
            f"target embedding {th}x{tw} not achievable: stage outputs {shapes} "
            f"for input {config.input_hw[0]}x{config.input_hw[1]}"
        )


class SharedEncoder(nn.Module):
    """Torch realization of the encoder; one instance holds the trainable weights."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        convs = []
        prev = config.in_channels
        for stage in config.stages:
            convs.append(
                nn.Conv2d(prev, stage.out_channels, stage.kernel_size, stage.stride, stage.padding)
            )
            prev = stage.out_channels
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor, training: bool = False) -> torch.Tensor:
        """(B, in_channels, H, W) -> (B, d, h, w). Dropout fires only if ``training``."""
        if x.shape[-2:] != torch.Size(self.config.input_hw):
            raise ConfigError(
                f"input is {tuple(x.shape[-2:])}, encoder expects {self.config.input_hw}"
            )
        inputs = x
        for conv, stage in zip(self.convs, self.config.stages):
            x = conv(x)
            x = F.leaky_relu(x, negative_slope=self.config.negative_slope)
            if self.config.dropout > 0.0:
                x = F.dropout(x, p=self.config.dropout, training=training)
            if stage.pool > 1:
                x = F.avg_pool2d(x, stage.pool)
        x = F.adaptive_avg_pool2d(x, self.config.embedding_hw)
        if not torch.isfinite(x).all():
            self._locate_nonfinite_stage(inputs)
        return x

    def _locate_nonfinite_stage(self, inputs: torch.Tensor) -> None:
        # Re-run without dropout purely to name the first offending stage.
        with torch.no_grad():
            x = inputs
            for idx, (conv, stage) in enumerate(zip(self.convs, self.config.stages)):
                x = F.leaky_relu(conv(x), negative_slope=self.config.negative_slope)
                if stage.pool > 1:
                    x = F.avg_pool2d(x, stage.pool)
                if not torch.isfinite(x).all():
                    raise NumericError(f"non-finite values after encoder stage {idx}")
        raise NumericError("non-finite values in encoder output")

    def encode(self, channel_image: torch.Tensor, training: bool = False) -> torch.Tensor:
        """One channel slice (H, W) or batch (B, H, W) -> embedding grid(s) (.., h, w, d)."""
        squeeze = channel_image.ndim == 2
        if squeeze:
            channel_image = channel_image.unsqueeze(0)
        out = self.forward(channel_image.unsqueeze(1), training=training)
        grids = out.permute(0, 2, 3, 1)
        return grids.squeeze(0) if squeeze else grids

    def encode_all_channels(self, sample: torch.Tensor, training: bool = False) -> torch.Tensor:
        """(B, H, W, C) or (H, W, C) -> (B, C, h, w, d) or (C, h, w, d).

        All channel slices share the same weights; slices are folded into the
        batch dimension so one convolution call covers the whole batch.
        """
        if self.config.in_channels != 1:
            raise ConfigError("per-channel encoding requires an in_channels=1 encoder")
        squeeze = sample.ndim == 3
        if squeeze:
            sample = sample.unsqueeze(0)
        b, h, w, c = sample.shape
        folded = sample.permute(0, 3, 1, 2).reshape(b * c, 1, h, w)
        out = self.forward(folded, training=training)
        grids = out.reshape(b, c, *out.shape[1:]).permute(0, 1, 3, 4, 2)
        return grids.squeeze(0) if squeeze else grids


def init_encoder(config: EncoderConfig, seed: int) -> SharedEncoder:
    """Fan-in scaled uniform initialization, deterministic per seed."""
    encoder = SharedEncoder(config)
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + config.negative_slope**2))
    with torch.no_grad():
        for conv in encoder.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = gain * math.sqrt(3.0 / fan_in)
            conv.weight.uniform_(-bound, bound, generator=gen)
            conv.bias.uniform_(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), generator=gen)
    return encoder
