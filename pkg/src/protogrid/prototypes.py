"""Prototype similarity layer with location scaling and projection.

Similarity between an embedding grid and a prototype vector is the
log-ratio ``log((D + 1) / (D + eps))`` of the squared Euclidean distance map
``D``, optionally multiplied by a trainable per-location scaling grid. The
layer's concatenated output orders prototypes channel-major, then by class,
then by prototype index within the class; that ordering is the contract for
head weights, checkpoints, and explanations.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .encoder import ConfigError

DEFAULT_EPSILON = 1e-4


class ProjectionError(RuntimeError):
    pass


def log_ratio_similarity(dist: torch.Tensor, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """log((D+1)/(D+eps)); strictly decreasing in D, peaking at ln(1/eps)."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    return torch.log1p(dist) - torch.log(dist + epsilon)


def squared_distance_grid(embedding: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """(h, w, d) x (N, d) -> (N, h, w) squared Euclidean distances."""
    if embedding.shape[-1] != prototypes.shape[-1]:
        raise ValueError(
            f"embedding dim {embedding.shape[-1]} != prototype dim {prototypes.shape[-1]}"
        )
    diff = embedding.unsqueeze(0) - prototypes[:, None, None, :]
    return diff.square().sum(dim=-1)


def similarity_grid(
    embedding: torch.Tensor,
    prototypes: torch.Tensor,
    scaling: torch.Tensor | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Scaled similarity grid (N, h, w) for one channel's embedding."""
    sim = log_ratio_similarity(squared_distance_grid(embedding, prototypes), epsilon)
    if scaling is not None:
        if scaling.shape != sim.shape:
            raise ValueError(f"scaling shape {tuple(scaling.shape)} != grid {tuple(sim.shape)}")
        sim = sim * scaling
    return sim


def max_pool_similarity(grid: torch.Tensor) -> tuple[torch.Tensor, np.ndarray]:
    """Per-prototype maximum over locations, ties resolved in raster order.

    Returns the (N,) max values (differentiable) and an (N, 2) integer array
    of (u, v) argmax positions.
    """
    if grid.ndim != 3 or grid.numel() == 0:
        raise ValueError(f"expected nonempty (N, h, w) grid, got shape {tuple(grid.shape)}")
    n, h, w = grid.shape
    values = grid.reshape(n, h * w).max(dim=1).values
    flat_idx = grid.detach().reshape(n, h * w).numpy().argmax(axis=1)
    positions = np.stack([flat_idx // w, flat_idx % w], axis=1)
    return values, positions


def concat_max_similarities(per_channel: list[torch.Tensor]) -> torch.Tensor:
    """Stack C per-channel (N,) max vectors into the (A,) channel-major vector."""
    lengths = {tuple(v.shape) for v in per_channel}
    if len(lengths) != 1 or per_channel[0].ndim != 1:
        raise ValueError(f"per-channel vectors must share one (N,) shape, got {lengths}")
    return torch.cat(list(per_channel), dim=0)


class PrototypeBank(nn.Module):
    """All prototypes of a model: (channels, classes * per_class, dim) vectors.

    Prototype ``n`` of any channel belongs to class ``n // per_class``. When
    location scaling is disabled the scaling grid is a constant-one buffer and
    carries no gradient. Provenance (source sample id, patch row, patch col)
    is -1 until the first projection.
    """

    def __init__(
        self,
        num_channels: int,
        num_classes: int,
        per_class: int,
        embedding_shape: tuple[int, int, int],
        location_scaling: bool = True,
        epsilon: float = DEFAULT_EPSILON,
        seed: int = 0,
    ):
        super().__init__()
        if epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {epsilon}")
        h, w, d = embedding_shape
        self.num_channels = num_channels
        self.num_classes = num_classes
        self.per_class = per_class
        self.embedding_shape = embedding_shape
        self.epsilon = epsilon
        self.location_scaling = location_scaling
        n = num_classes * per_class

        gen = torch.Generator().manual_seed(seed)
        phi = torch.rand((num_channels, n, d), generator=gen)
        self.phi = nn.Parameter(phi)
        omega = torch.ones((num_channels, n, h, w))
        if location_scaling:
            self.omega = nn.Parameter(omega)
        else:
            self.register_buffer("omega", omega)
        self.register_buffer("provenance", torch.full((num_channels, n, 3), -1, dtype=torch.int64))

    @property
    def per_channel(self) -> int:
        """N: prototypes per channel (= classes * per_class)."""
        return self.num_classes * self.per_class

    @property
    def total(self) -> int:
        """A: prototypes across all channels, the length of the concat vector."""
        return self.num_channels * self.per_channel

    @property
    def projected(self) -> bool:
        return bool((self.provenance[..., 0] >= 0).all())

    def class_of(self, flat_index: int) -> tuple[int, int, int]:
        """Map a position in the concat vector to (channel, class, index in class)."""
        n = self.per_channel
        channel, rest = divmod(int(flat_index), n)
        cls, idx = divmod(rest, self.per_class)
        return channel, cls, idx

    def class_block(self, label: int) -> slice:
        return slice(label * self.per_class, (label + 1) * self.per_class)

    def distance_grids(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w, d) -> (B, C, N, h, w) squared distances to every prototype."""
        if embeddings.ndim != 5:
            raise ValueError(f"expected (B, C, h, w, d), got {tuple(embeddings.shape)}")
        if embeddings.shape[1] != self.num_channels:
            raise ValueError(
                f"embeddings carry {embeddings.shape[1]} channels, bank has {self.num_channels}"
            )
        diff = embeddings.unsqueeze(2) - self.phi[None, :, :, None, None, :]
        return diff.square().sum(dim=-1)

    def similarity(self, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (scaled similarity grids (B, C, N, h, w), distance grids)."""
        dist = self.distance_grids(embeddings)
        sim = log_ratio_similarity(dist, self.epsilon) * self.omega.unsqueeze(0)
        return sim, dist

    def max_similarities(self, embeddings: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w, d) -> (B, A) channel-major concatenated max similarities."""
        sim, _ = self.similarity(embeddings)
        b = sim.shape[0]
        return sim.reshape(b, self.num_channels, self.per_channel, -1).amax(dim=-1).reshape(b, -1)

    @torch.no_grad()
    def project(
        self,
        embeddings: torch.Tensor,
        labels: torch.Tensor,
        sample_ids: torch.Tensor,
    ) -> None:
        """Replace every prototype with its nearest same-class training patch.

        ``embeddings``: (n, C, h, w, d) computed with dropout disabled;
        ``labels`` and ``sample_ids``: (n,). Candidates are restricted to the
        prototype's own channel and class; ties resolve to the smallest sample
        id, then raster order. Scaling grids are untouched. The bank is
        rewritten only after every replacement is known.
        """
        if embeddings.shape[0] != labels.shape[0] or labels.shape[0] != sample_ids.shape[0]:
            raise ValueError("embeddings, labels, and sample ids must align")
        h, w, _ = self.embedding_shape
        ids_np = sample_ids.numpy()
        labels_np = labels.numpy()
        order = np.argsort(ids_np, kind="stable")
        new_phi = torch.empty_like(self.phi)
        new_prov = torch.empty_like(self.provenance)
        for cls in range(self.num_classes):
            cand_rows = torch.from_numpy(order[labels_np[order] == cls])
            if cand_rows.numel() == 0:
                raise ProjectionError(f"no training samples of class {cls} to project onto")
            cand_ids = sample_ids[cand_rows]
            block = self.class_block(cls)
            for channel in range(self.num_channels):
                cand = embeddings[cand_rows, channel].reshape(-1, self.embedding_shape[2])
                protos = self.phi[channel, block]
                dist = (cand.unsqueeze(0) - protos.unsqueeze(1)).square().sum(dim=-1)
                best = dist.numpy().argmin(axis=1)
                for offset, flat in enumerate(best):
                    row, pos = divmod(int(flat), h * w)
                    u, v = divmod(pos, w)
                    p = block.start + offset
                    new_phi[channel, p] = embeddings[cand_rows[row], channel, u, v]
                    new_prov[channel, p, 0] = cand_ids[row]
                    new_prov[channel, p, 1] = u
                    new_prov[channel, p, 2] = v
        self.phi.copy_(new_phi)
        self.provenance.copy_(new_prov)
