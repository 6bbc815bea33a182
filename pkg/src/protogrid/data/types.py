"""Dataset containers shared by generation, ingestion, and training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RasterSample:
    """One H x W x C grid with an integer class label."""

    pixels: np.ndarray
    label: int
    id: int


class SplitPart:
    """Ordered collection of samples, stored densely for fast batching."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, ids: np.ndarray):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (n, H, W, C), got shape {images.shape}")
        if labels.shape != (images.shape[0],) or ids.shape != (images.shape[0],):
            raise ValueError("labels/ids length must match image count")
        if not np.isfinite(images).all():
            raise ValueError("images contain non-finite values")
        self.images = images
        self.labels = labels
        self.ids = ids

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> RasterSample:
        return RasterSample(pixels=self.images[i], label=int(self.labels[i]), id=int(self.ids[i]))

    @property
    def shape(self) -> tuple[int, int, int]:
        """(H, W, C) of each sample."""
        return tuple(self.images.shape[1:])

    def sample_by_id(self, sample_id: int) -> RasterSample:
        hits = np.nonzero(self.ids == sample_id)[0]
        if hits.size == 0:
            raise KeyError(f"no sample with id {sample_id}; ids span {self.ids.min()}..{self.ids.max()}")
        return self[int(hits[0])]


@dataclass
class DatasetSplit:
    """Train/validation/test parts plus the label and channel vocabulary."""

    train: SplitPart
    validation: SplitPart
    test: SplitPart
    k: int
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        parts = {"train": self.train, "validation": self.validation, "test": self.test}
        shapes = {name: p.shape for name, p in parts.items() if len(p)}
        if not shapes:
            raise ValueError("dataset has no samples in any split")
        ref = next(iter(shapes.values()))
        for name, shape in shapes.items():
            if shape != ref:
                raise ValueError(f"split {name!r} has shape {shape}, expected {ref}")
        c = ref[2]
        if not self.channel_names:
            self.channel_names = [f"channel_{j + 1}" for j in range(c)]
        if len(self.channel_names) != c:
            raise ValueError(f"{len(self.channel_names)} channel names for C={c} channels")
        seen: set[int] = set()
        for name, part in parts.items():
            if len(part) and (part.labels.min() < 0 or part.labels.max() >= self.k):
                raise ValueError(f"split {name!r} has labels outside [0, {self.k})")
            ids = set(part.ids.tolist())
            if len(ids) != len(part):
                raise ValueError(f"split {name!r} has duplicate sample ids")
            if ids & seen:
                raise ValueError(f"split {name!r} shares sample ids with another split")
            seen |= ids

    @property
    def shape(self) -> tuple[int, int, int]:
        for part in (self.train, self.validation, self.test):
            if len(part):
                return part.shape
        raise ValueError("empty dataset")

    @property
    def num_channels(self) -> int:
        return self.shape[2]

    def part(self, name: str) -> SplitPart:
        try:
            return {"train": self.train, "validation": self.validation, "test": self.test}[name]
        except KeyError:
            raise KeyError(f"unknown split {name!r}") from None


def channel_stats(part: SplitPart) -> list[dict[str, float]]:
    """Per-channel min/max/mean over one split, for ingestion logging."""
    stats = []
    for j in range(part.shape[2]):
        chan = part.images[..., j]
        stats.append({"min": float(chan.min()), "max": float(chan.max()), "mean": float(chan.mean())})
    return stats
