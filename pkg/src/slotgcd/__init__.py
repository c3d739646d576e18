"""Generalized category discovery with adaptive slot attention.

The pipeline decomposes spatial feature maps into adaptively selected slots,
fuses pooled slot statistics with the encoder's global feature, and trains
the whole stack with reconstruction plus image-scale contrastive losses.
Evaluation clusters every embedding with semi-supervised k-means and scores
the unlabeled set through Hungarian matching.
"""

from .backbone import FeatureMap, build_backbone, extract_features, trainable_parameters
from .clusterer import AdaptiveSlotAttention, SlotState, gumbel_keep_sample
from .config import (BackboneConfig, ClustererConfig, DataConfig, DecoderConfig,
                     LossWeights, OptimConfig, PipelineConfig, RepresentationConfig,
                     load_config)
from .data import (AugConfig, SplitSpec, SyntheticScene, ViewPair, build_split,
                   load_split, make_views, save_split, synthetic_dataset)
from .decoder import MaskedSlotDecoder, Reconstruction, reconstruction_loss
from .errors import ConfigurationError, DataError, NumericError, SlotGCDError
from .evaluation import ClusterReport, evaluate_embeddings, hungarian_accuracy, ss_kmeans
from .model import Checkpoint, DiscoveryModel, load_checkpoint, model_from_checkpoint
from .representation import (FusionHead, ProjectionHead, UnifiedVector, overall_loss,
                             pool_slots, sup_contrastive, unsup_contrastive)
from .train import evaluate_checkpoint, export_embeddings, sweep, train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSlotAttention", "AugConfig", "BackboneConfig", "Checkpoint",
    "ClusterReport", "ClustererConfig", "ConfigurationError", "DataConfig",
    "DataError", "DecoderConfig", "DiscoveryModel", "FeatureMap", "FusionHead",
    "LossWeights", "MaskedSlotDecoder", "NumericError", "OptimConfig",
    "PipelineConfig", "ProjectionHead", "Reconstruction", "RepresentationConfig",
    "SlotGCDError", "SlotState", "SplitSpec", "SyntheticScene", "UnifiedVector",
    "ViewPair", "build_backbone", "build_split", "evaluate_checkpoint",
    "evaluate_embeddings", "export_embeddings", "extract_features",
    "gumbel_keep_sample", "hungarian_accuracy", "load_checkpoint", "load_config",
    "load_split", "make_views", "model_from_checkpoint", "overall_loss",
    "pool_slots", "reconstruction_loss", "save_split", "ss_kmeans",
    "sup_contrastive", "sweep", "synthetic_dataset", "train",
    "trainable_parameters", "unsup_contrastive",
]
