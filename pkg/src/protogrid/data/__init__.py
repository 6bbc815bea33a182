"""Dataset generation, ingestion, and containers."""

from .digits import DigitPool, load_digit_pool, render_digit_pool, save_digit_pool
from .manifest import load_raster_dataset, parse_keyvalue, save_raster_dataset
from .synthetic import GenerationError, append_noise_channel, generate_synthetic_mnist, split_sizes
from .types import DatasetSplit, RasterSample, SplitPart, channel_stats

__all__ = [
    "DatasetSplit",
    "DigitPool",
    "GenerationError",
    "RasterSample",
    "SplitPart",
    "append_noise_channel",
    "channel_stats",
    "generate_synthetic_mnist",
    "load_digit_pool",
    "load_raster_dataset",
    "parse_keyvalue",
    "render_digit_pool",
    "save_digit_pool",
    "save_raster_dataset",
    "split_sizes",
]
