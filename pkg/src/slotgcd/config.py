"""Pipeline configuration: typed sub-configs plus a flat key=value file format.

Config files are plain text with dotted keys, e.g.::

    clusterer.k_max=50
    loss.lambda_u=0.6
    # comments and blank lines are ignored

CLI ``--set key=value`` flags override file values with the same syntax.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .errors import ConfigurationError

SELECTION_MODES = ("stochastic", "hard", "keep-all")


@dataclass
class BackboneConfig:
    """Feature extractor settings (pretrained ViT adapter or synthetic stand-in)."""

    kind: str = "synthetic"  # "pretrained-vit" | "synthetic"
    input_size: int = 224
    patch_size: int = 16
    feat_dim: int = 768
    trainable_depth: int = 1
    depth: int = 12
    num_heads: int = 12
    weights_path: str = ""
    # synthetic backbone only
    grid_size: int = 8
    part_vocab: int = 64
    part_separation: float = 1.0
    noise_std: float = 0.02
    embed_seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("pretrained-vit", "synthetic"):
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        if self.feat_dim <= 0:
            raise ConfigurationError("backbone.feat_dim must be positive")
        if self.trainable_depth < 0:
            raise ConfigurationError("backbone.trainable_depth must be >= 0")
        if self.kind == "pretrained-vit":
            if self.input_size % self.patch_size != 0:
                raise ConfigurationError(
                    f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
                )
            if self.trainable_depth > self.depth:
                raise ConfigurationError(
                    f"trainable_depth {self.trainable_depth} exceeds block count {self.depth}"
                )
        else:
            if self.grid_size < 1 or self.part_vocab < 1:
                raise ConfigurationError("synthetic backbone needs grid_size >= 1 and part_vocab >= 1")
            if self.noise_std < 0:
                raise ConfigurationError("backbone.noise_std must be >= 0")

    @property
    def grid_hw(self) -> tuple[int, int]:
        """Spatial layout of the local feature map."""
        if self.kind == "pretrained-vit":
            side = self.input_size // self.patch_size
            return side, side
        return self.grid_size, self.grid_size

    @property
    def num_positions(self) -> int:
        h, w = self.grid_hw
        return h * w


@dataclass
class ClustererConfig:
    """Adaptive slot attention settings."""

    k_max: int = 50
    d_slot: int = 64
    iterations: int = 3
    gumbel_temperature: float = 1.0
    selection_mode: str = "stochastic"  # "stochastic" | "hard" | "keep-all"
    sparsity_weight: float = 0.0

    def validate(self) -> None:
        if self.k_max < 1:
            raise ConfigurationError("clusterer.k_max must be >= 1")
        if self.d_slot < 1:
            raise ConfigurationError("clusterer.d_slot must be >= 1")
        if self.iterations < 1:
            raise ConfigurationError("clusterer.iterations must be >= 1")
        if self.gumbel_temperature <= 0:
            raise ConfigurationError("clusterer.gumbel_temperature must be > 0")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigurationError(
                f"clusterer.selection_mode must be one of {SELECTION_MODES}, got {self.selection_mode!r}"
            )
        if self.sparsity_weight < 0:
            raise ConfigurationError("clusterer.sparsity_weight must be >= 0")


@dataclass
class DecoderConfig:
    """Masked slot decoder settings; output width is always feat_dim + 1."""

    layers: int = 4
    hidden: int = 128

    def validate(self) -> None:
        if self.layers < 2:
            raise ConfigurationError("decoder.layers must be >= 2")
        if self.hidden < 1:
            raise ConfigurationError("decoder.hidden must be >= 1")


@dataclass
class RepresentationConfig:
    """Projection head settings for the contrastive embeddings."""

    proj_hidden: int = 2048
    proj_out: int = 256

    def validate(self) -> None:
        if self.proj_hidden < 1 or self.proj_out < 1:
            raise ConfigurationError("representation sizes must be >= 1")


@dataclass
class LossWeights:
    """Weights and temperatures of the overall objective."""

    lambda_u: float = 0.6
    lambda_s: float = 0.3
    lambda_rec: float = 0.1
    temperature_u: float = 0.07
    temperature_s: float = 0.07

    def validate(self) -> None:
        if min(self.lambda_u, self.lambda_s, self.lambda_rec) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if max(self.lambda_u, self.lambda_s, self.lambda_rec) <= 0:
            raise ConfigurationError("at least one loss weight must be > 0")
        if self.temperature_u <= 0 or self.temperature_s <= 0:
            raise ConfigurationError("contrastive temperatures must be > 0")


@dataclass
class DataConfig:
    """Dataset source, split protocol, and augmentation ranges."""

    kind: str = "synthetic"  # "synthetic" | "image-index"
    index_path: str = ""
    split_path: str = ""  # optional: load a serialized split instead of building one
    # synthetic dataset
    n_classes: int = 10
    instances_per_class: int = 100
    parts_min: int = 2
    parts_max: int = 8
    # split protocol
    known: str = "0.5"  # fraction in (0,1], or "ids:1,2,3"
    labeled_fraction: float = 0.5
    # augmentation
    crop_min: float = 0.6
    crop_max: float = 1.0
    flip_prob: float = 0.5
    jitter: float = 0.4
    max_shift: int = 2
    scene_noise: bool = True

    def validate(self) -> None:
        if self.kind not in ("synthetic", "image-index"):
            raise ConfigurationError(f"unknown data kind {self.kind!r}")
        if self.kind == "image-index" and not self.index_path:
            raise ConfigurationError("data.index_path required for image-index datasets")
        if not 0.0 < self.labeled_fraction < 1.0:
            raise ConfigurationError("data.labeled_fraction must lie in (0, 1)")
        if self.parts_min < 1 or self.parts_max < self.parts_min:
            raise ConfigurationError("invalid parts_per_class range")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ConfigurationError("crop scale range must satisfy 0 < min <= max <= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError("flip_prob must lie in [0, 1]")

    def known_spec(self) -> float | list[int]:
        """Parse the known-class spec: a fraction or an explicit id list."""
        text = self.known.strip()
        if text.startswith("ids:"):
            body = text[len("ids:"):].strip()
            if not body:
                raise ConfigurationError("empty known-class id list")
            return [int(tok) for tok in body.split(",")]
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse data.known={text!r}") from exc


@dataclass
class OptimConfig:
    """Optimizer and schedule for the training loop."""

    algorithm: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"  # "cosine" | "constant"
    epochs: int = 30
    batch_size: int = 64
    backbone_lr_scale: float = 0.1

    def validate(self) -> None:
        if self.algorithm not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.algorithm!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1:
            raise ConfigurationError("optim.epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("optim.batch_size must be >= 2 (contrastive losses need negatives)")
        if self.lr <= 0:
            raise ConfigurationError("optim.lr must be > 0")


@dataclass
class PipelineConfig:
    """Everything needed to reproduce one training run."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    clusterer: ClustererConfig = field(default_factory=ClustererConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    representation: RepresentationConfig = field(default_factory=RepresentationConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        for sub in (self.backbone, self.clusterer, self.decoder, self.representation,
                    self.loss, self.data, self.optim):
            sub.validate()


_SECTIONS = {
    "backbone": BackboneConfig,
    "clusterer": ClustererConfig,
    "decoder": DecoderConfig,
    "representation": RepresentationConfig,
    "loss": LossWeights,
    "data": DataConfig,
    "optim": OptimConfig,
}
_TOP_KEYS = ("seed", "out_dir")


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {raw!r} as {target_type.__name__}") from exc


def set_key(config: PipelineConfig, key: str, value: str) -> None:
    """Assign one dotted key on a config in place, with type coercion."""
    key = key.strip()
    if key in _TOP_KEYS:
        target_type = int if key == "seed" else str
        setattr(config, key, _coerce(value, target_type))
        return
    if "." not in key:
        raise ConfigurationError(f"invalid config key {key!r}")
    section, _, name = key.partition(".")
    if section not in _SECTIONS:
        raise ConfigurationError(f"unknown config section {section!r}")
    sub = getattr(config, section)
    if name not in {f.name for f in fields(sub)}:
        raise ConfigurationError(f"unknown config key {key!r}")
    setattr(sub, name, _coerce(value, _field_type(sub, name)))


def _field_type(obj, name: str) -> type:
    # dataclass field types are stored as strings under `from __future__ import annotations`
    value = getattr(obj, name)
    return type(value)


def parse_assignments(lines: Sequence[str], config: PipelineConfig) -> PipelineConfig:
    """Apply ``key=value`` assignment lines to a config (mutates and returns it)."""
    for line in lines:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigurationError(f"expected key=value, got {text!r}")
        key, _, value = text.partition("=")
        set_key(config, key, value.strip())
    return config


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> PipelineConfig:
    """Read a flat config file, apply overrides, validate, and return the config."""
    config = PipelineConfig()
    text = Path(path).read_text()
    parse_assignments(text.splitlines(), config)
    parse_assignments(list(overrides), config)
    config.validate()
    return config


def apply_overrides(config: PipelineConfig, overrides: Sequence[str]) -> PipelineConfig:
    """Return a deep copy of ``config`` with ``key=value`` overrides applied."""
    clone = dataclasses.replace(
        config,
        **{f.name: dataclasses.replace(getattr(config, f.name)) if dataclasses.is_dataclass(getattr(config, f.name)) else getattr(config, f.name)
           for f in fields(config)},
    )
    parse_assignments(list(overrides), clone)
    clone.validate()
    return clone


def to_flat_dict(config: PipelineConfig) -> dict[str, object]:
    """Flatten a config into dotted keys (checkpoint snapshot format)."""
    flat: dict[str, object] = {k: getattr(config, k) for k in _TOP_KEYS}
    for section in _SECTIONS:
        sub = getattr(config, section)
        for f in fields(sub):
            flat[f"{section}.{f.name}"] = getattr(sub, f.name)
    return flat


def from_flat_dict(flat: dict[str, object]) -> PipelineConfig:
    """Rebuild a config from its flattened snapshot."""
    config = PipelineConfig()
    for key, value in flat.items():
        if key in _TOP_KEYS:
            setattr(config, key, value)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config key {key!r} in snapshot")
        setattr(getattr(config, section), name, value)
    config.validate()
    return config
