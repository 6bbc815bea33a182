"""Zero-bias linear head over concatenated max similarities."""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


class ZeroBiasHead(nn.Module):
    """Linear map from the (A,) similarity vector to K class logits, no bias.

    The bias is structurally absent, so every logit is exactly the sum of
    per-prototype contributions ``similarity * weight``; explanations rely on
    that decomposition.
    """

    def __init__(self, num_inputs: int, num_classes: int, seed: int = 0, init_scale: float = 0.01):
        super().__init__()
        self.linear = nn.Linear(num_inputs, num_classes, bias=False)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.uniform_(-init_scale, init_scale, generator=gen)

    @property
    def psi(self) -> torch.Tensor:
        """Weight matrix of shape (A, K): psi[a, k] links prototype a to class k."""
        return self.linear.weight.t()

    def forward(self, max_sims: torch.Tensor) -> torch.Tensor:
        if max_sims.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"similarity vector length {max_sims.shape[-1]} != head input {self.linear.in_features}"
            )
        return self.linear(max_sims)


def classify(max_sims: torch.Tensor, head: ZeroBiasHead) -> torch.Tensor:
    """Softmax class probabilities for one (A,) vector or a (B, A) batch."""
    return F.softmax(head(max_sims), dim=-1)
