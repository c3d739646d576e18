"""Adaptive slot attention: iterative grouping plus learned keep/drop selection.

Slots compete for grid positions through softmax-over-slots attention, are
refined by a gated recurrent update, and finally pass through a small scoring
network that decides which slots survive. Stochastic selection samples a
straight-through Gumbel-Softmax so the keep decision stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ClustererConfig
from .errors import DataError


@dataclass
class SlotState:
    """Batched clusterer output.

    slots: (B, K, D_slot) refined slot vectors.
    attention: (B, K, N) softmax-over-slots weights; columns sum to one.
    keep_prob: (B, K) keep-class probability of the scoring network.
    keep_mask: (B, K) binary survival mask; at least one slot per element.
    """

    slots: torch.Tensor
    attention: torch.Tensor
    keep_prob: torch.Tensor
    keep_mask: torch.Tensor

    def kept_count(self) -> torch.Tensor:
        """Number of surviving slots per batch element."""
        return self.keep_mask.detach().sum(dim=1)


def gumbel_keep_sample(logits: torch.Tensor, temperature: float,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """Straight-through Gumbel-Softmax over (..., 2) keep/drop logits.

    Forward emits an exact one-hot; backward follows the tempered softmax.
    The hard sample hits class k with probability softmax(logits)[k]
    regardless of temperature.
    """
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    neg_log_u = -torch.log(u.clamp_min(1e-20))
    gumbel = -torch.log(neg_log_u.clamp_min(1e-20))
    y_soft = F.softmax((logits + gumbel) / temperature, dim=-1)
    index = y_soft.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y_soft).scatter_(-1, index, 1.0)
    # grouping keeps the forward value an exact one-hot
    return y_hard + (y_soft - y_soft.detach())


class AdaptiveSlotAttention(nn.Module):
    """Slot attention over a flattened feature map with adaptive slot count."""

    def __init__(self, feat_dim: int, cfg: ClustererConfig, eps: float = 1e-8):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.eps = eps
        d = cfg.d_slot

        self.slot_mu = nn.Parameter(torch.zeros(d))
        self.slot_log_sigma = nn.Parameter(torch.zeros(d))
        nn.init.uniform_(self.slot_mu, -(d ** -0.5), d ** -0.5)
        nn.init.uniform_(self.slot_log_sigma, -(d ** -0.5), d ** -0.5)

        self.norm_input = nn.LayerNorm(feat_dim)
        self.norm_slot = nn.LayerNorm(d)
        self.norm_ff = nn.LayerNorm(d)
        self.project_q = nn.Linear(d, d, bias=False)
        self.project_k = nn.Linear(feat_dim, d, bias=False)
        self.project_v = nn.Linear(feat_dim, d, bias=False)
        self.gru = nn.GRUCell(d, d)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))
        self.selector = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 2))
        # start keep-leaning so early training sees every slot
        nn.init.constant_(self.selector[-1].bias[0], 1.0)
        nn.init.constant_(self.selector[-1].bias[1], 0.0)

    def init_slots(self, batch_size: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Sample (B, K, D_slot) initial slots from the shared learned Gaussian.

        Every slot of every batch element gets an independent draw, which makes
        the initialization sample-specific.
        """
        param = self.slot_mu
        noise = torch.randn(batch_size, self.cfg.k_max, self.cfg.d_slot,
                            generator=generator, dtype=param.dtype, device=param.device)
        return self.slot_mu + torch.exp(self.slot_log_sigma) * noise

    def attend(self, slots: torch.Tensor, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Iteratively refine slots against (B, N, feat_dim) features.

        Returns the refined slots and the final (B, K, N) attention map.
        """
        if features.ndim != 3 or features.shape[1] == 0:
            raise DataError("feature map must be (B, N, D) with N >= 1")
        b, n, _ = features.shape
        d = self.cfg.d_slot
        x = self.norm_input(features)
        k = self.project_k(x)
        v = self.project_v(x)
        scale = d ** -0.5
        attn = None
        for _ in range(self.cfg.iterations):
            prev = slots
            q = self.project_q(self.norm_slot(slots)) * scale
            logits = torch.einsum("bkd,bnd->bkn", q, k)
            attn = logits.softmax(dim=1)  # competition across slots
            weights = attn / (attn.sum(dim=2, keepdim=True) + self.eps)
            updates = torch.einsum("bkn,bnd->bkd", weights, v)
            slots = self.gru(updates.reshape(-1, d), prev.reshape(-1, d)).view(b, -1, d)
            slots = slots + self.ff(self.norm_ff(slots))
        return slots, attn

    def keep_logits(self, slots: torch.Tensor) -> torch.Tensor:
        """Per-slot (keep, drop) scores from the selection network."""
        return self.selector(slots)

    def select_slots(self, slots: torch.Tensor, generator: torch.Generator | None = None,
                     mode: str | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Decide which slots survive.

        Stochastic mode samples a straight-through Gumbel-Softmax at the
        configured temperature; hard mode takes the argmax with ties broken
        toward keeping; keep-all disables selection. If an element would lose
        every slot, the slot with the highest keep probability is force-kept.
        """
        mode = mode or self.cfg.selection_mode
        logits = self.keep_logits(slots)
        keep_prob = logits.softmax(dim=-1)[..., 0]
        if mode == "keep-all":
            return keep_prob, torch.ones_like(keep_prob)
        if mode == "hard":
            mask = (logits[..., 0] >= logits[..., 1]).to(keep_prob.dtype)
        elif mode == "stochastic":
            sample = gumbel_keep_sample(logits, self.cfg.gumbel_temperature, generator)
            mask = sample[..., 0]
        else:
            raise DataError(f"unknown selection mode {mode!r}")
        empty = mask.detach().sum(dim=1) == 0
        if empty.any():
            forced = mask.detach().clone()
            forced[empty, keep_prob.detach()[empty].argmax(dim=1)] = 1.0
            mask = mask + (forced - mask).detach()
        return keep_prob, mask

    def sparsity_penalty(self, state: SlotState) -> torch.Tensor:
        """Mean keep probability, the optional pressure toward fewer slots."""
        return state.keep_prob.sum(dim=1).mean() / self.cfg.k_max

    def forward(self, features: torch.Tensor, generator: torch.Generator | None = None,
                mode: str | None = None) -> SlotState:
        """init_slots -> attend -> select_slots over (B, N, feat_dim) features."""
        slots = self.init_slots(features.shape[0], generator)
        slots, attn = self.attend(slots, features)
        keep_prob, keep_mask = self.select_slots(slots, generator, mode)
        return SlotState(slots=slots, attention=attn, keep_prob=keep_prob, keep_mask=keep_mask)
