"""Masked slot decoder: per-slot spatial broadcast with alpha mixing.

Every slot is broadcast across all grid positions, offset by a learned
positional table, and decoded by a shared MLP into feature values plus one
alpha logit. Dropped slots are excluded from the softmax over slots, so their
mixing weights are exactly zero and the survivors renormalize among
themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import DecoderConfig
from .errors import ConfigurationError, DataError


@dataclass
class Reconstruction:
    """Decoder output for a batch.

    recon: (B, N, D_feat) mixed reconstruction of the feature map.
    alpha: (B, K, N) mixing weights; each position's column sums to one and
        dropped slots contribute exactly zero.
    per_slot: (B, K, N, D_feat) individual slot reconstructions.
    """

    recon: torch.Tensor
    alpha: torch.Tensor
    per_slot: torch.Tensor


def masked_slot_softmax(logits: torch.Tensor, keep_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the slot axis restricted to kept slots.

    ``logits`` is (B, K, N), ``keep_mask`` is (B, K) with values in {0, 1}.
    Dropped slots get exactly zero weight; kept slots renormalize to one.
    Multiplying by the mask (rather than offsetting logits by -1e9) keeps the
    gradient w.r.t. a straight-through mask bounded.
    """
    fwd_mask = keep_mask.detach()
    if (fwd_mask.sum(dim=1) == 0).any():
        raise DataError("every position needs at least one kept slot")
    mask = keep_mask.unsqueeze(-1)
    stabilizer = logits.detach().masked_fill(fwd_mask.unsqueeze(-1) == 0, float("-inf")).amax(dim=1, keepdim=True)
    # clamp keeps exp() of dominant dropped logits finite; kept slots are unaffected
    num = mask * torch.exp((logits - stabilizer).clamp(max=20.0))
    return num / num.sum(dim=1, keepdim=True)


class MaskedSlotDecoder(nn.Module):
    """Spatial-broadcast MLP decoder with a learned positional table."""

    def __init__(self, feat_dim: int, num_positions: int, slot_dim: int, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.feat_dim = feat_dim
        self.pos_table = nn.Parameter(torch.randn(num_positions, slot_dim) * 0.02)
        widths = [slot_dim] + [cfg.hidden] * (cfg.layers - 1) + [feat_dim + 1]
        layers: list[nn.Module] = []
        for i in range(cfg.layers):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < cfg.layers - 1:
                layers.append(nn.ReLU())
        self.mlp = nn.Sequential(*layers)

    def forward(self, slots: torch.Tensor, keep_mask: torch.Tensor) -> Reconstruction:
        """Decode (B, K, D_slot) slots under a (B, K) keep mask."""
        z = slots.unsqueeze(2) + self.pos_table  # (B, K, N, D_slot)
        out = self.mlp(z)
        per_slot = out[..., : self.feat_dim]
        alpha_logits = out[..., self.feat_dim]
        alpha = masked_slot_softmax(alpha_logits, keep_mask)
        recon = (alpha.unsqueeze(-1) * per_slot).sum(dim=1)
        return Reconstruction(recon=recon, alpha=alpha, per_slot=per_slot)

    def check_positions(self, num_positions: int) -> None:
        if num_positions != self.pos_table.shape[0]:
            raise ConfigurationError(
                f"decoder positional table covers {self.pos_table.shape[0]} positions, "
                f"feature map has {num_positions}"
            )


def reconstruction_loss(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every feature element (and the batch)."""
    if target.shape != recon.shape:
        raise DataError(f"shape mismatch: target {tuple(target.shape)} vs recon {tuple(recon.shape)}")
    return ((target - recon) ** 2).mean()
