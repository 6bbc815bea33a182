"""Training loss terms for the prototype stages.

Stage 1 combines cross-entropy with three prototype terms, each computed over
per-channel distance grids: a cluster term pulling some same-class prototype
near every sample, a separation term (a pure negative minimum) pushing
wrong-class prototypes away, and a hinged pairwise diversity term keeping
prototypes of one (class, channel) group apart. Stage 3 is cross-entropy plus
an L1 penalty on the head weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .prototypes import PrototypeBank


@dataclass(frozen=True)
class LossConfig:
    cluster: float = 0.7
    separation: float = 0.7
    diversity: float = 0.001
    diversity_threshold: float = 0.001
    l1: float = 0.01

    def __post_init__(self):
        for name in ("cluster", "separation", "diversity", "diversity_threshold", "l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss coefficient {name} must be >= 0")
        if self.diversity > 0 and self.diversity_threshold <= 0:
            raise ValueError("diversity threshold must be > 0 when the diversity term is active")


def _min_distance_per_class(dist: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """(B, C, N, h, w) distances -> (B, C, K) min over each class block and location."""
    b, c = dist.shape[:2]
    grouped = dist.reshape(b, c, bank.num_classes, bank.per_class, -1)
    return grouped.amin(dim=(-2, -1))


def cluster_loss(dist: torch.Tensor, labels: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Mean over samples and channels of the distance to the nearest same-class prototype."""
    per_class = _min_distance_per_class(dist, bank)
    rows = torch.arange(labels.shape[0], device=dist.device)
    return per_class[rows, :, labels].mean()


def separation_loss(dist: torch.Tensor, labels: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Negated mean distance to the nearest wrong-class prototype (channel-wise)."""
    if bank.num_classes < 2:
        return dist.new_zeros(())
    per_class = _min_distance_per_class(dist, bank)
    rows = torch.arange(labels.shape[0], device=dist.device)
    masked = per_class.clone()
    masked[rows, :, labels] = float("inf")
    return -masked.amin(dim=-1).mean()


def diversity_loss(bank: PrototypeBank, threshold: float) -> torch.Tensor:
    """Hinged mean over pairs of same-(class, channel) prototypes.

    Each unordered pair contributes max(0, threshold - ||a - b||^2); the loss
    is 0 once all pairs are at least sqrt(threshold) apart and at most
    ``threshold`` (all pairs coincident).
    """
    if bank.per_class < 2:
        return bank.phi.new_zeros(())
    groups = bank.phi.reshape(bank.num_channels, bank.num_classes, bank.per_class, -1)
    diff = groups.unsqueeze(3) - groups.unsqueeze(2)
    sq = diff.square().sum(dim=-1)
    iu, jv = torch.triu_indices(bank.per_class, bank.per_class, offset=1)
    return F.relu(threshold - sq[:, :, iu, jv]).mean()


def stage1_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    dist: torch.Tensor,
    bank: PrototypeBank,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Cross-entropy plus the three weighted prototype terms; returns (total, parts)."""
    ce = F.cross_entropy(logits, labels)
    clst = cluster_loss(dist, labels, bank)
    sep = separation_loss(dist, labels, bank)
    div = diversity_loss(bank, cfg.diversity_threshold)
    total = ce + cfg.cluster * clst + cfg.separation * sep + cfg.diversity * div
    parts = {
        "cross_entropy": float(ce.detach()),
        "cluster": float(clst.detach()),
        "separation": float(sep.detach()),
        "diversity": float(div.detach()),
    }
    return total, parts


def stage3_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    psi: torch.Tensor,
    l1: float,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Cross-entropy plus l1 * sum(|psi|); gradients reach only the head weights."""
    ce = F.cross_entropy(logits, labels)
    penalty = psi.abs().sum()
    total = ce + l1 * penalty
    return total, {"cross_entropy": float(ce.detach()), "l1_penalty": float(penalty.detach())}
