"""Local and global explanations for trained prototype models.

A local explanation ranks prototype contribution scores (max similarity times
head weight for the class under explanation) and resolves each top prototype
to its source training patch and the input-pixel receptive field of its best
matching location. Global explanations aggregate the head-weight matrix by
channel and count how often each prototype supplies the top score across a
split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data.types import RasterSample, SplitPart
from .encoder import SharedEncoder
from .model import ChannelProtoModel, _ModelBase
from .prototypes import max_pool_similarity


@dataclass(frozen=True)
class PixelBox:
    """Inclusive input-pixel bounds (row0..row1, col0..col1)."""

    row0: int
    row1: int
    col0: int
    col1: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row0, self.row1, self.col0, self.col1)


def _linearized_copy(encoder: SharedEncoder) -> SharedEncoder:
    """Copy with identity activations, |weights|, zero bias: impulses cannot
    cancel or be masked by dead units, so nonzero deltas trace exactly the
    architectural connectivity."""
    clone = SharedEncoder(encoder.config)
    with torch.no_grad():
        for src, dst in zip(encoder.convs, clone.convs):
            dst.weight.copy_(src.weight.abs())
            dst.bias.zero_()
    return clone


def _linear_forward(encoder: SharedEncoder, x: torch.Tensor) -> torch.Tensor:
    cfg = encoder.config
    for conv, stage in zip(encoder.convs, cfg.stages):
        x = conv(x)
        if stage.pool > 1:
            x = F.avg_pool2d(x, stage.pool)
    return F.adaptive_avg_pool2d(x, cfg.embedding_hw)


def receptive_field_map(encoder: SharedEncoder, chunk: int = 256) -> np.ndarray:
    """Pixel box per embedding location via the impulse "ping" sweep.

    Feeds one impulse image per input pixel through a linearized encoder copy
    and records, for every embedding location, the bounding box of pixels
    whose impulse produced a nonzero delta there. Returns an (h, w, 4) int
    array of (row0, row1, col0, col1). The sweep is cached on the encoder.
    """
    cached = getattr(encoder, "_receptive_cache", None)
    if cached is not None:
        return cached
    height, width = encoder.config.input_hw
    h, w = encoder.config.embedding_hw
    probe = _linearized_copy(encoder)
    boxes = np.stack(
        [
            np.full((h, w), height, dtype=np.int64),
            np.full((h, w), -1, dtype=np.int64),
            np.full((h, w), width, dtype=np.int64),
            np.full((h, w), -1, dtype=np.int64),
        ],
        axis=-1,
    )
    n_pixels = height * width
    with torch.no_grad():
        for start in range(0, n_pixels, chunk):
            idx = torch.arange(start, min(start + chunk, n_pixels))
            impulses = torch.zeros(idx.numel(), encoder.config.in_channels, height, width)
            impulses.view(idx.numel(), -1)[torch.arange(idx.numel()), idx] = 1.0
            out = _linear_forward(probe, impulses)
            hits = out.abs().sum(dim=1) > 0  # (chunk, h, w)
            rows = (idx // width).numpy()
            cols = (idx % width).numpy()
            hits_np = hits.numpy()
            for b in range(idx.numel()):
                mask = hits_np[b]
                if not mask.any():
                    continue
                boxes[..., 0][mask] = np.minimum(boxes[..., 0][mask], rows[b])
                boxes[..., 1][mask] = np.maximum(boxes[..., 1][mask], rows[b])
                boxes[..., 2][mask] = np.minimum(boxes[..., 2][mask], cols[b])
                boxes[..., 3][mask] = np.maximum(boxes[..., 3][mask], cols[b])
    encoder._receptive_cache = boxes
    return boxes


def receptive_field(encoder: SharedEncoder, location: tuple[int, int]) -> PixelBox:
    """Input-pixel box influencing one embedding-grid location."""
    h, w = encoder.config.embedding_hw
    u, v = location
    if not (0 <= u < h and 0 <= v < w):
        raise ValueError(f"location {location} outside embedding grid {h}x{w}")
    row0, row1, col0, col1 = receptive_field_map(encoder)[u, v]
    return PixelBox(int(row0), int(row1), int(col0), int(col1))


@dataclass
class PrototypeContribution:
    prototype: int
    channel: int
    class_identity: int
    index_in_class: int
    score: float
    max_similarity: float
    head_weight: float
    location: tuple[int, int]
    receptive_box: PixelBox
    source_sample_id: int | None
    source_location: tuple[int, int] | None
    scaling: np.ndarray

    def to_dict(self) -> dict:
        return {
            "prototype": self.prototype,
            "channel": self.channel,
            "class_identity": self.class_identity,
            "index_in_class": self.index_in_class,
            "score": self.score,
            "max_similarity": self.max_similarity,
            "head_weight": self.head_weight,
            "location": list(self.location),
            "receptive_box": list(self.receptive_box.as_tuple()),
            "source_sample_id": self.source_sample_id,
            "source_location": list(self.source_location) if self.source_location else None,
            "scaling": self.scaling.tolist(),
        }


@dataclass
class LocalExplanation:
    sample_id: int
    predicted_class: int
    probability: float
    target_class: int
    contributions: list[PrototypeContribution]
    all_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_channels: int = 1
    unprojected_warning: bool = False

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "predicted_class": self.predicted_class,
            "probability": self.probability,
            "target_class": self.target_class,
            "num_channels": self.num_channels,
            "unprojected_warning": self.unprojected_warning,
            "all_scores": self.all_scores.tolist(),
            "contributions": [c.to_dict() for c in self.contributions],
        }


@dataclass
class ChannelWeightSummary:
    """Head-weight statistics grouped by channel (and by class within channel)."""

    psi_by_channel: np.ndarray  # (C, N, K)
    mean_abs: np.ndarray  # (C,)
    max_abs: np.ndarray  # (C,)
    near_zero_fraction: np.ndarray  # (C,)
    by_class_mean_abs: np.ndarray  # (C, K)
    near_zero_threshold: float

    def to_dict(self) -> dict:
        return {
            "mean_abs": self.mean_abs.tolist(),
            "max_abs": self.max_abs.tolist(),
            "near_zero_fraction": self.near_zero_fraction.tolist(),
            "by_class_mean_abs": self.by_class_mean_abs.tolist(),
            "near_zero_threshold": self.near_zero_threshold,
        }


@dataclass
class PrototypeFrequency:
    """How often each prototype (and channel) supplies the single top score."""

    counts: np.ndarray  # (A,)
    channel_counts: np.ndarray  # (C,)
    total: int
    class_filter: list[int] | None = None

    def ranked(self) -> list[tuple[int, int]]:
        order = np.argsort(-self.counts, kind="stable")
        return [(int(i), int(self.counts[i])) for i in order if self.counts[i] > 0]

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "channel_counts": self.channel_counts.tolist(),
            "total": self.total,
            "class_filter": self.class_filter,
        }


def _require_prototypes(model: _ModelBase) -> ChannelProtoModel:
    if not isinstance(model, ChannelProtoModel):
        raise TypeError(f"{model.kind} model has no prototype layer to explain")
    return model


def prototype_scores(
    model: _ModelBase, sample: RasterSample, target_class: int
) -> tuple[np.ndarray, bool]:
    """(A,) contribution scores for one sample and class, plus unprojected flag."""
    model = _require_prototypes(model)
    x = torch.from_numpy(np.ascontiguousarray(sample.pixels)).unsqueeze(0)
    with torch.no_grad():
        out = model.forward_full(x)
        scores = out.max_sims[0] * model.head.psi[:, target_class]
    return scores.numpy().copy(), not model.bank.projected


def local_explanation(model: _ModelBase, sample: RasterSample, top_k: int = 3) -> LocalExplanation:
    """Top-k prototype contributions for the predicted class of one sample."""
    model = _require_prototypes(model)
    x = torch.from_numpy(np.ascontiguousarray(sample.pixels)).unsqueeze(0)
    psi = model.head.psi.detach()
    with torch.no_grad():
        out = model.forward_full(x)
        probs = F.softmax(out.logits[0], dim=-1)
        predicted = int(out.logits[0].argmax())
        scores = (out.max_sims[0] * psi[:, predicted]).numpy().copy()
    bank = model.bank
    order = np.argsort(-scores, kind="stable")[: max(0, top_k)]
    contributions = []
    for flat in order:
        flat = int(flat)
        channel, cls, idx = bank.class_of(flat)
        n = flat % bank.per_channel
        grid = out.similarities[0, channel]
        _, positions = max_pool_similarity(grid)
        u, v = (int(positions[n, 0]), int(positions[n, 1]))
        prov = bank.provenance[channel, n]
        projected = int(prov[0]) >= 0
        contributions.append(
            PrototypeContribution(
                prototype=flat,
                channel=channel,
                class_identity=cls,
                index_in_class=idx,
                score=float(scores[flat]),
                max_similarity=float(out.max_sims[0, flat]),
                head_weight=float(psi[flat, predicted]),
                location=(u, v),
                receptive_box=receptive_field(model.encoder, (u, v)),
                source_sample_id=int(prov[0]) if projected else None,
                source_location=(int(prov[1]), int(prov[2])) if projected else None,
                scaling=bank.omega[channel, n].detach().numpy().copy(),
            )
        )
    return LocalExplanation(
        sample_id=sample.id,
        predicted_class=predicted,
        probability=float(probs[predicted]),
        target_class=predicted,
        contributions=contributions,
        all_scores=scores.copy(),
        num_channels=bank.num_channels,
        unprojected_warning=not bank.projected,
    )


def channel_weight_summary(model: _ModelBase, near_zero: float = 1e-3) -> ChannelWeightSummary:
    """Per-channel statistics of the head-weight matrix."""
    model = _require_prototypes(model)
    bank = model.bank
    psi = model.head.psi.detach().numpy().copy()  # (A, K)
    grouped = psi.reshape(bank.num_channels, bank.per_channel, -1)
    absg = np.abs(grouped)
    return ChannelWeightSummary(
        psi_by_channel=grouped,
        mean_abs=absg.mean(axis=(1, 2)),
        max_abs=absg.max(axis=(1, 2)),
        near_zero_fraction=(absg < near_zero).mean(axis=(1, 2)),
        by_class_mean_abs=absg.mean(axis=1),
        near_zero_threshold=near_zero,
    )


def top_prototype_frequency(
    model: _ModelBase,
    part: SplitPart,
    class_filter: set[int] | None = None,
    batch_size: int = 256,
) -> PrototypeFrequency:
    """Count top-scoring prototypes over correctly classified samples."""
    model = _require_prototypes(model)
    bank = model.bank
    counts = np.zeros(bank.total, dtype=np.int64)
    psi = model.head.psi.detach()
    images = torch.from_numpy(part.images)
    labels = part.labels
    with torch.no_grad():
        for start in range(0, len(part), batch_size):
            out = model.forward_full(images[start : start + batch_size])
            preds = out.logits.argmax(dim=1).numpy()
            truth = labels[start : start + batch_size]
            scores = out.max_sims.numpy() * psi.numpy()[:, preds].T
            for row, (p, t) in enumerate(zip(preds, truth)):
                if p != t:
                    continue
                if class_filter is not None and t not in class_filter:
                    continue
                counts[int(np.argmax(scores[row]))] += 1
    channel_counts = counts.reshape(bank.num_channels, -1).sum(axis=1)
    return PrototypeFrequency(
        counts=counts,
        channel_counts=channel_counts,
        total=int(counts.sum()),
        class_filter=sorted(class_filter) if class_filter else None,
    )
