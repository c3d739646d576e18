"""The full discovery model: encoder, clusterer, decoder, fusion, projection.

One module owns every trainable piece so checkpoints are a single state
dict. Loss computation for a two-view batch lives here; the training loop in
``train`` only orchestrates batching and optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import backbone as backbone_mod
from .clusterer import AdaptiveSlotAttention, SlotState
from .config import PipelineConfig, from_flat_dict, to_flat_dict
from .data import SyntheticScene
from .decoder import MaskedSlotDecoder, Reconstruction, reconstruction_loss
from .errors import DataError, NumericError
from .representation import (FusionHead, ProjectionHead, overall_loss,
                             pool_slots, sup_contrastive, unsup_contrastive)


class DiscoveryModel(nn.Module):
    """Backbone + adaptive slot clusterer + masked decoder + fusion/projection."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = backbone_mod.build_backbone(config.backbone)
        self.clusterer = AdaptiveSlotAttention(config.backbone.feat_dim, config.clusterer)
        self.decoder = MaskedSlotDecoder(config.backbone.feat_dim,
                                         config.backbone.num_positions,
                                         config.clusterer.d_slot, config.decoder)
        self.fusion = FusionHead(config.clusterer.d_slot, config.backbone.feat_dim)
        self.projection = ProjectionHead(3 * config.backbone.feat_dim, config.representation)

    def encode(self, batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Backbone forward returning flat (B, N, D) features and (B, D) globals."""
        if isinstance(self.backbone, backbone_mod.SyntheticBackbone):
            part_grids, noise_seeds = batch
            local, global_vec = self.backbone(part_grids, noise_seeds)
        else:
            local, global_vec = self.backbone(batch)
        b = local.shape[0]
        return local.reshape(b, -1, local.shape[-1]), global_vec

    def cluster_and_decode(self, features: torch.Tensor,
                           generator: torch.Generator | None = None,
                           mode: str | None = None) -> tuple[SlotState, Reconstruction]:
        self.decoder.check_positions(features.shape[1])
        state = self.clusterer(features, generator, mode)
        recon = self.decoder(state.slots, state.keep_mask)
        return state, recon

    def represent(self, state: SlotState, global_vec: torch.Tensor) -> torch.Tensor:
        """Unified g_all vector for a clustered batch."""
        mean_pool, max_pool = pool_slots(state.slots, state.keep_mask)
        return self.fusion(global_vec, mean_pool, max_pool).g_all

    def view_forward(self, batch, generator=None, mode=None):
        """Encode one augmented view and run the full head stack."""
        features, global_vec = self.encode(batch)
        state, recon = self.cluster_and_decode(features, generator, mode)
        g_all = self.represent(state, global_vec)
        z = self.projection(g_all)
        return features, state, recon, g_all, z

    def compute_losses(self, batch1, batch2, labels: torch.Tensor, labeled_mask: torch.Tensor,
                       generator: torch.Generator | None = None,
                       mode: str | None = None) -> dict[str, torch.Tensor]:
        """Loss components for a two-view batch.

        ``labels`` holds class ids (only consulted where ``labeled_mask`` is
        true). Reconstruction is averaged over views; the supervised term is
        zero when the batch carries no labeled instances.
        """
        h1, state1, recon1, _, z1 = self.view_forward(batch1, generator, mode)
        h2, state2, recon2, _, z2 = self.view_forward(batch2, generator, mode)
        w = self.config.loss
        l_rec = 0.5 * (reconstruction_loss(h1, recon1.recon) + reconstruction_loss(h2, recon2.recon))
        l_unsup = unsup_contrastive(z1, z2, w.temperature_u)
        if labeled_mask.any():
            z_lab = torch.cat([z1[labeled_mask], z2[labeled_mask]], dim=0)
            lab = torch.cat([labels[labeled_mask], labels[labeled_mask]], dim=0)
            l_sup = sup_contrastive(z_lab, lab, w.temperature_s)
        else:
            l_sup = z1.new_zeros(())
        components = {"rec": l_rec, "sup": l_sup, "unsup": l_unsup}
        for name, value in components.items():
            if not torch.isfinite(value):
                raise NumericError(f"non-finite {name} loss component")
        # "overall" is the weighted three-term objective; the optimized
        # "objective" adds the optional slot-sparsity penalty on top.
        total = overall_loss(l_rec, l_sup, l_unsup, w)
        components["overall"] = total
        objective = total
        sparsity = self.config.clusterer.sparsity_weight
        if sparsity > 0:
            penalty = 0.5 * (self.clusterer.sparsity_penalty(state1)
                             + self.clusterer.sparsity_penalty(state2))
            components["sparsity"] = penalty
            objective = total + sparsity * penalty
        components["objective"] = objective
        components["kept_slots"] = 0.5 * (state1.kept_count().float().mean()
                                          + state2.kept_count().float().mean())
        return components

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    @torch.no_grad()
    def embed_instances(self, instances, seed: int = 0, batch_size: int = 256) -> dict[str, np.ndarray]:
        """Deterministic g_all embeddings with hard slot selection.

        ``instances`` is a list of SyntheticScene or (instance_id, image
        tensor) pairs; no augmentation is applied.
        """
        was_training = self.training
        self.eval()
        generator = torch.Generator().manual_seed(seed)
        # a keep-all model has no trained selector, so it evaluates unmasked
        mode = "keep-all" if self.config.clusterer.selection_mode == "keep-all" else "hard"
        out: dict[str, np.ndarray] = {}
        for start in range(0, len(instances), batch_size):
            chunk = instances[start: start + batch_size]
            ids, batch = collate_batch(chunk)
            features, global_vec = self.encode(batch)
            state, _ = self.cluster_and_decode(features, generator, mode=mode)
            g_all = self.represent(state, global_vec)
            for i, instance_id in enumerate(ids):
                out[instance_id] = g_all[i].cpu().numpy().astype(np.float32)
        if was_training:
            self.train()
        return out


def collate_batch(items):
    """Stack scenes or (id, image) pairs into a model-ready batch."""
    if not items:
        raise DataError("empty batch")
    if isinstance(items[0], SyntheticScene):
        ids = [s.instance_id for s in items]
        grids = torch.from_numpy(np.stack([s.part_grid for s in items]))
        seeds = [s.noise_seed for s in items]
        return ids, (grids, seeds)
    ids = [i for i, _ in items]
    images = torch.stack([img for _, img in items])
    return ids, images


@dataclass
class Checkpoint:
    """A saved model: weights, config snapshot, progress, and metric history."""

    state_dict: dict
    config: PipelineConfig
    epoch: int
    history: dict

    def save(self, path) -> None:
        torch.save({"state_dict": self.state_dict,
                    "config": to_flat_dict(self.config),
                    "epoch": self.epoch,
                    "history": self.history}, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(state_dict=payload["state_dict"],
                      config=from_flat_dict(payload["config"]),
                      epoch=payload["epoch"],
                      history=payload["history"])


def model_from_checkpoint(ckpt: Checkpoint) -> DiscoveryModel:
    model = DiscoveryModel(ckpt.config)
    model.load_state_dict(ckpt.state_dict)
    return model
