"""Image-scale representation: slot pooling, fusion with the global feature,
projection, and the contrastive objectives.

The unified vector concatenates the encoder's global feature with linear
projections of the mean- and max-pooled kept slots, giving a 3*D_feat vector
per image. Contrastive losses operate on the unit-normalized projection head
output.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights, RepresentationConfig
from .errors import DataError, NumericError


@dataclass
class UnifiedVector:
    """Batched image representation g_all = [global | mean-pool proj | max-pool proj]."""

    g_all: torch.Tensor  # (B, 3 * D_feat)

    @property
    def feat_dim(self) -> int:
        return self.g_all.shape[-1] // 3

    @property
    def global_part(self) -> torch.Tensor:
        return self.g_all[..., : self.feat_dim]

    @property
    def mean_part(self) -> torch.Tensor:
        return self.g_all[..., self.feat_dim: 2 * self.feat_dim]

    @property
    def max_part(self) -> torch.Tensor:
        return self.g_all[..., 2 * self.feat_dim:]


def pool_slots(slots: torch.Tensor, keep_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and coordinatewise max over kept slots only.

    ``slots`` is (B, K, D_slot); ``keep_mask`` is (B, K) in {0, 1}. Raises if
    any element has no kept slot (the clusterer's force-keep rule prevents
    this in normal operation).
    """
    counts = keep_mask.detach().sum(dim=1)
    if (counts == 0).any():
        raise DataError("pool_slots requires at least one kept slot per element")
    mask = keep_mask.unsqueeze(-1)
    mean_pool = (mask * slots).sum(dim=1) / keep_mask.sum(dim=1, keepdim=True)
    masked = slots.masked_fill(mask.detach() == 0, float("-inf"))
    max_pool = masked.amax(dim=1)
    return mean_pool, max_pool


class FusionHead(nn.Module):
    """Projects pooled slot statistics to feature width and concatenates."""

    def __init__(self, slot_dim: int, feat_dim: int):
        super().__init__()
        self.mean_proj = nn.Linear(slot_dim, feat_dim)
        self.max_proj = nn.Linear(slot_dim, feat_dim)

    def forward(self, global_vec: torch.Tensor, mean_pool: torch.Tensor,
                max_pool: torch.Tensor) -> UnifiedVector:
        g_all = torch.cat([global_vec, self.mean_proj(mean_pool), self.max_proj(max_pool)], dim=-1)
        return UnifiedVector(g_all=g_all)


class ProjectionHead(nn.Module):
    """Three-layer MLP followed by unit normalization."""

    def __init__(self, in_dim: int, cfg: RepresentationConfig):
        super().__init__()
        cfg.validate()
        h = cfg.proj_hidden
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, cfg.proj_out),
        )

    def forward(self, g_all: torch.Tensor) -> torch.Tensor:
        z = self.mlp(g_all)
        norms = z.norm(dim=-1)
        if (norms < 1e-12).any():
            raise NumericError("projection collapsed to zero norm before normalization")
        return z / norms.unsqueeze(-1)


def unsup_contrastive(z_view1: torch.Tensor, z_view2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over the doubled batch.

    Row i of each view is the other's positive; every remaining embedding in
    the 2B stack is a negative. Rows are assumed unit-norm.
    """
    b = z_view1.shape[0]
    if b < 2:
        raise DataError("unsupervised contrastive loss needs batch >= 2 for negatives")
    z = torch.cat([z_view1, z_view2], dim=0)
    sim = z @ z.T / temperature
    eye = torch.eye(2 * b, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    targets = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    return F.cross_entropy(sim, targets)


def sup_contrastive(z: torch.Tensor, labels: torch.Tensor, temperature: float) -> torch.Tensor:
    """Supervised contrastive loss over labeled embeddings.

    For each anchor, positives are all other rows sharing its label and the
    denominator runs over every other row. Anchors without a positive are
    skipped; if none has one the batch is degenerate and an error is raised.
    """
    n = z.shape[0]
    if n < 2:
        raise DataError("supervised contrastive loss needs at least two embeddings")
    labels = labels.reshape(-1)
    if labels.shape[0] != n:
        raise DataError("labels must align with embeddings")
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    pos_mask = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~eye
    has_pos = pos_mask.any(dim=1)
    if not has_pos.any():
        raise DataError("degenerate labeled batch: no anchor has a positive")
    logits = (z @ z.T / temperature).masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    # where() avoids 0 * -inf = nan on the masked diagonal
    pos_log_prob = torch.where(pos_mask, log_prob, log_prob.new_zeros(())).sum(dim=1)
    per_anchor = pos_log_prob[has_pos] / pos_mask.sum(dim=1)[has_pos]
    return -per_anchor.mean()


def overall_loss(l_rec, l_sup, l_unsup, weights: LossWeights):
    """Weighted sum of the three loss components."""
    return weights.lambda_rec * l_rec + weights.lambda_s * l_sup + weights.lambda_u * l_unsup
