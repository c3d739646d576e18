"""Feature extractors: a ViT adapter with partial freezing and a synthetic stand-in.

Both backbones emit a spatial local feature grid plus one global vector per
image. The synthetic backbone embeds part-id grids through a fixed random
codebook so that clustering behaviour is testable without pretrained weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import BackboneConfig
from .errors import ConfigurationError, DataError, NumericError


@dataclass
class FeatureMap:
    """Per-image encoder output: local grid (H, W, D) and global vector (D,)."""

    local: torch.Tensor
    global_vec: torch.Tensor
    image_id: str = ""

    @property
    def num_positions(self) -> int:
        return self.local.shape[0] * self.local.shape[1]

    def flat_local(self) -> torch.Tensor:
        """Local grid flattened to (N, D)."""
        return self.local.reshape(-1, self.local.shape[-1])


class SyntheticBackbone(nn.Module):
    """Deterministic embedding of part-id grids, with seeded per-view noise.

    Each grid cell receives the codebook vector of its part id plus Gaussian
    noise of scale ``noise_std``. The codebook is sampled once from a seeded
    generator; construction fails if any two part embeddings come closer than
    four noise standard deviations, which keeps parts linearly separable.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        if cfg.kind != "synthetic":
            raise ConfigurationError("SyntheticBackbone requires backbone.kind=synthetic")
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.embed_seed)
        table = torch.randn(cfg.part_vocab, cfg.feat_dim, generator=gen)
        table = cfg.part_separation * table / table.norm(dim=1, keepdim=True)
        if cfg.part_vocab > 1 and cfg.noise_std > 0:
            dist = torch.cdist(table, table)
            dist.fill_diagonal_(float("inf"))
            margin = dist.min().item()
            if margin < 4.0 * cfg.noise_std:
                raise ConfigurationError(
                    f"part embedding margin {margin:.4f} below 4x noise std {4 * cfg.noise_std:.4f}; "
                    "raise part_separation or lower noise_std"
                )
        self.register_buffer("part_embeddings", table)

    def forward(self, part_grids: torch.Tensor, noise_seeds) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed a batch of (B, H, W) part-id grids.

        Returns (local, global) with shapes (B, H, W, D) and (B, D); the
        global vector is the mean over grid positions.
        """
        if part_grids.ndim != 3:
            raise DataError(f"expected (B, H, W) part grids, got shape {tuple(part_grids.shape)}")
        if part_grids.max().item() >= self.cfg.part_vocab or part_grids.min().item() < 0:
            raise DataError("part id outside codebook range")
        local = self.part_embeddings[part_grids]
        if self.cfg.noise_std > 0:
            noise = torch.empty_like(local)
            for b, seed in enumerate(noise_seeds):
                g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFF)
                noise[b] = torch.randn(local.shape[1:], generator=g)
            local = local + self.cfg.noise_std * noise
        return local, local.mean(dim=(1, 2))


class TransformerBlock(nn.Module):
    """Pre-norm transformer block: self-attention plus a 4x MLP."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VisionTransformerBackbone(nn.Module):
    """Compact ViT encoder whose final blocks can stay trainable.

    The class token after the final layer norm is the global feature; the
    remaining tokens reshape to the (H, W, D) local grid. Weights are loaded
    from ``cfg.weights_path`` when given (a plain state dict), otherwise the
    module starts from random init.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        if cfg.kind != "pretrained-vit":
            raise ConfigurationError("VisionTransformerBackbone requires backbone.kind=pretrained-vit")
        self.cfg = cfg
        side = cfg.input_size // cfg.patch_size
        num_patches = side * side
        self.patch_embed = nn.Conv2d(3, cfg.feat_dim, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.feat_dim))
        self.pos_embed = nn.Parameter(torch.randn(1, num_patches + 1, cfg.feat_dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.feat_dim, cfg.num_heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.feat_dim)
        if cfg.weights_path:
            state = torch.load(cfg.weights_path, map_location="cpu", weights_only=True)
            self.load_state_dict(state)
        self.set_trainable_depth(cfg.trainable_depth)

    def set_trainable_depth(self, depth: int) -> None:
        """Freeze everything except the last ``depth`` blocks (and final norm)."""
        if depth > len(self.blocks):
            raise ConfigurationError(
                f"trainable_depth {depth} exceeds block count {len(self.blocks)}"
            )
        for p in self.parameters():
            p.requires_grad_(False)
        if depth > 0:
            for block in self.blocks[-depth:]:
                for p in block.parameters():
                    p.requires_grad_(True)
            for p in self.norm.parameters():
                p.requires_grad_(True)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DataError(f"expected (B, 3, H, W) images, got shape {tuple(images.shape)}")
        if images.shape[-2] != self.cfg.input_size or images.shape[-1] != self.cfg.input_size:
            raise ConfigurationError(
                f"images are {images.shape[-2]}x{images.shape[-1]}, config expects {self.cfg.input_size}"
            )
        x = self.patch_embed(images)  # B, D, h, w
        b, d, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1) + self.pos_embed
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after transformer block {i}")
        x = self.norm(x)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite activations after final layer norm")
        global_vec = x[:, 0]
        local = x[:, 1:].reshape(b, h, w, d)
        return local, global_vec


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    cfg.validate()
    if cfg.kind == "synthetic":
        return SyntheticBackbone(cfg)
    return VisionTransformerBackbone(cfg)


def extract_features(backbone: nn.Module, batch, image_ids=None) -> list[FeatureMap]:
    """Run the backbone over a batch and wrap each image's output as a FeatureMap.

    ``batch`` is an image tensor (B, 3, H, W) for the ViT adapter, or a pair
    ``(part_grids, noise_seeds)`` for the synthetic backbone.
    """
    if isinstance(backbone, SyntheticBackbone):
        part_grids, noise_seeds = batch
        if part_grids.shape[0] == 0:
            raise DataError("empty batch")
        local, global_vec = backbone(part_grids, noise_seeds)
    else:
        if batch.shape[0] == 0:
            raise DataError("empty batch")
        local, global_vec = backbone(batch)
    ids = image_ids if image_ids is not None else [""] * local.shape[0]
    return [FeatureMap(local=local[i], global_vec=global_vec[i], image_id=ids[i])
            for i in range(local.shape[0])]


def trainable_parameters(backbone: nn.Module) -> dict[str, nn.Parameter]:
    """Named parameters that receive gradients; frozen ones are excluded."""
    return {name: p for name, p in backbone.named_parameters() if p.requires_grad}
