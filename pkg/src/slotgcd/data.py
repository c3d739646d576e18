"""Datasets, discovery splits, and two-view augmentation.

A split partitions a dataset index into a labeled subset (drawn only from
known classes) and an unlabeled remainder that mixes held-out known-class
instances with every novel-class instance. The synthetic dataset builds
part-composed scenes on a small grid so the whole pipeline can be exercised
without image files.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import DataConfig
from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class SplitSpec:
    """Labeled/unlabeled partition of a dataset index."""

    known_classes: tuple[int, ...]
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    seed: int

    def all_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.labeled_ids + self.unlabeled_ids))


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """A grid of part ids plus the class that generated it."""

    instance_id: str
    class_id: int
    part_grid: np.ndarray  # (H, W) int64, values are part ids
    noise_seed: int

    @property
    def parts(self) -> list[tuple[int, np.ndarray]]:
        """(part_id, boolean region mask) pairs; regions partition the grid."""
        return [(int(pid), self.part_grid == pid) for pid in np.unique(self.part_grid)]

    def __eq__(self, other) -> bool:
        return (isinstance(other, SyntheticScene)
                and self.instance_id == other.instance_id
                and self.class_id == other.class_id
                and self.noise_seed == other.noise_seed
                and np.array_equal(self.part_grid, other.part_grid))

    def __hash__(self) -> int:
        return hash((self.instance_id, self.class_id, self.noise_seed))


@dataclass(frozen=True)
class ViewPair:
    """Two augmentations of the same source instance."""

    view1: object
    view2: object
    source_id: str


@dataclass
class AugConfig:
    """Augmentation ranges; image knobs and scene knobs coexist."""

    crop_min: float = 0.6
    crop_max: float = 1.0
    flip_prob: float = 0.5
    jitter: float = 0.4
    max_shift: int = 2
    scene_noise: bool = True

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(crop_min=1.0, crop_max=1.0, flip_prob=0.0, jitter=0.0,
                   max_shift=0, scene_noise=False)

    @classmethod
    def from_data_config(cls, cfg: DataConfig) -> "AugConfig":
        return cls(crop_min=cfg.crop_min, crop_max=cfg.crop_max, flip_prob=cfg.flip_prob,
                   jitter=cfg.jitter, max_shift=cfg.max_shift, scene_noise=cfg.scene_noise)


def build_split(index: Sequence[tuple[str, int]], known: float | Sequence[int],
                labeled_fraction: float = 0.5, seed: int = 0) -> SplitSpec:
    """Sample the labeled/unlabeled partition from (instance_id, class_id) pairs.

    Known classes come either from an explicit id list or as the first
    floor(fraction * num_classes) classes in canonical (sorted) order. Within
    each known class, floor(labeled_fraction * count) instances are sampled
    uniformly without replacement; everything else is unlabeled.
    """
    if not 0.0 < labeled_fraction < 1.0:
        raise ConfigurationError(f"labeled_fraction must lie in (0, 1), got {labeled_fraction}")
    if not index:
        raise DataError("empty dataset index")
    by_class: dict[int, list[str]] = {}
    seen: set[str] = set()
    for instance_id, class_id in index:
        if instance_id in seen:
            raise DataError(f"duplicate instance id {instance_id!r}")
        seen.add(instance_id)
        by_class.setdefault(int(class_id), []).append(instance_id)
    classes = sorted(by_class)
    if isinstance(known, float):
        if not 0.0 < known <= 1.0:
            raise ConfigurationError(f"known-class fraction must lie in (0, 1], got {known}")
        known_classes = classes[: int(np.floor(known * len(classes)))]
    else:
        known_classes = sorted(int(c) for c in known)
        missing = set(known_classes) - set(classes)
        if missing:
            raise ConfigurationError(f"known classes {sorted(missing)} absent from index")
    if not known_classes:
        raise ConfigurationError("no known classes selected")
    if set(known_classes) == set(classes):
        warnings.warn("known classes cover every class: no novel categories to discover",
                      stacklevel=2)

    rng = np.random.default_rng(seed)
    labeled: list[str] = []
    for c in known_classes:
        ids = sorted(by_class[c])
        count = int(np.floor(labeled_fraction * len(ids)))
        chosen = rng.choice(len(ids), size=count, replace=False)
        labeled.extend(ids[i] for i in sorted(chosen))
    labeled_set = set(labeled)
    unlabeled = sorted(i for i, _ in index if i not in labeled_set)
    return SplitSpec(known_classes=tuple(known_classes), labeled_ids=tuple(sorted(labeled)),
                     unlabeled_ids=tuple(unlabeled), seed=seed)


def save_split(spec: SplitSpec, labels: Mapping[str, int], path: str | Path) -> None:
    """Serialize a split as a line-delimited text file (byte-stable)."""
    lines = [f"# seed={spec.seed}",
             "# known_classes=" + ",".join(str(c) for c in spec.known_classes)]
    for instance_id in sorted(spec.labeled_ids + spec.unlabeled_ids):
        part = "L" if instance_id in set(spec.labeled_ids) else "U"
        lines.append(f"{instance_id},{labels[instance_id]},{part}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path: str | Path) -> tuple[SplitSpec, dict[str, int]]:
    """Read a serialized split; returns the spec and the instance -> class map."""
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith("# seed=") or not lines[1].startswith("# known_classes="):
        raise DataError(f"malformed split file {path}")
    seed = int(lines[0].split("=", 1)[1])
    known = tuple(int(c) for c in lines[1].split("=", 1)[1].split(",") if c)
    labeled, unlabeled, labels = [], [], {}
    for line in lines[2:]:
        if not line.strip():
            continue
        instance_id, class_id, part = line.split(",")
        labels[instance_id] = int(class_id)
        (labeled if part == "L" else unlabeled).append(instance_id)
    return (SplitSpec(known_classes=known, labeled_ids=tuple(labeled),
                      unlabeled_ids=tuple(unlabeled), seed=seed), labels)


def load_index(path: str | Path) -> list[tuple[str, str, int]]:
    """Read an index CSV of ``instance_id,path,class_id`` rows."""
    rows = []
    for line in Path(path).read_text().splitlines():
        text = line.strip()
        if not text or text.startswith("#") or text.startswith("instance_id"):
            continue
        fields = text.split(",")
        if len(fields) != 3:
            raise DataError(f"bad index row {text!r}")
        rows.append((fields[0], fields[1], int(fields[2])))
    if not rows:
        raise DataError(f"empty index {path}")
    return rows


def synthetic_dataset(n_classes: int, parts_per_class_range: tuple[int, int] = (2, 8),
                      instances_per_class: int = 100, seed: int = 0,
                      grid_size: int = 8) -> list[SyntheticScene]:
    """Generate part-composed scenes with class-specific part vocabularies.

    Class c owns a private block of part ids whose size cycles through the
    requested range, so class identity is recoverable from part statistics by
    construction. Instances vary the part placement (a seeded Voronoi layout
    on the grid) and the feature-noise seed.
    """
    lo, hi = parts_per_class_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"invalid parts range {parts_per_class_range}")
    if hi > grid_size * grid_size:
        raise DataError(f"{hi} parts cannot partition a {grid_size}x{grid_size} grid")
    rng = np.random.default_rng(seed)
    coords = np.stack(np.meshgrid(np.arange(grid_size), np.arange(grid_size),
                                  indexing="ij"), axis=-1).reshape(-1, 2)
    scenes = []
    offset = 0
    for c in range(n_classes):
        n_parts = lo + (c % (hi - lo + 1))
        part_ids = np.arange(offset, offset + n_parts)
        offset += n_parts
        for i in range(instances_per_class):
            scenes.append(_place_parts(part_ids, coords, grid_size, rng,
                                       instance_id=f"syn-{c:03d}-{i:04d}", class_id=c))
    return scenes


def _place_parts(part_ids: np.ndarray, coords: np.ndarray, grid_size: int,
                 rng: np.random.Generator, instance_id: str, class_id: int) -> SyntheticScene:
    """Grow part regions from random anchors with a capacity cap.

    Cells greedily join their nearest anchor while the part is below
    ceil(1.25 * cells / parts), so regions stay within a bounded size ratio
    and the per-class part census is a reliable signature.
    """
    n_cells = grid_size * grid_size
    n_parts = len(part_ids)
    anchors = rng.choice(n_cells, size=n_parts, replace=False)
    dist = np.linalg.norm(coords[:, None, :] - coords[anchors][None, :, :], axis=-1)
    capacity = int(np.ceil(1.25 * n_cells / n_parts))
    assignment = np.full(n_cells, -1, dtype=np.int64)
    counts = np.zeros(n_parts, dtype=np.int64)
    order = np.dstack(np.unravel_index(np.argsort(dist, axis=None), dist.shape))[0]
    for cell, part in order:
        if assignment[cell] < 0 and counts[part] < capacity:
            assignment[cell] = part
            counts[part] += 1
    grid = part_ids[assignment].reshape(grid_size, grid_size)
    return SyntheticScene(instance_id=instance_id, class_id=class_id,
                          part_grid=grid.astype(np.int64),
                          noise_seed=int(rng.integers(2 ** 31 - 1)))


def scene_count_parts(dataset: Sequence[SyntheticScene]) -> int:
    """Total part vocabulary size implied by a synthetic dataset."""
    return int(max(s.part_grid.max() for s in dataset)) + 1


def make_views(instance, aug: AugConfig, seed: int, source_id: str | None = None) -> ViewPair:
    """Two independent seeded augmentations of one instance.

    Synthetic scenes get a toroidal translation plus optionally a fresh
    feature-noise seed per view; image tensors get crop/flip/jitter. The
    identity config returns the source unchanged in both views.
    """
    rng = np.random.default_rng(seed)
    if isinstance(instance, SyntheticScene):
        views = [_augment_scene(instance, aug, rng) for _ in range(2)]
        source_id = instance.instance_id if source_id is None else source_id
    elif isinstance(instance, torch.Tensor):
        views = [_augment_image(instance, aug, rng) for _ in range(2)]
    else:
        raise DataError(f"cannot augment instance of type {type(instance).__name__}")
    return ViewPair(view1=views[0], view2=views[1], source_id=source_id or "")


def _augment_scene(scene: SyntheticScene, aug: AugConfig, rng: np.random.Generator) -> SyntheticScene:
    grid = scene.part_grid
    if aug.max_shift > 0:
        dy, dx = rng.integers(-aug.max_shift, aug.max_shift + 1, size=2)
        grid = np.roll(grid, (int(dy), int(dx)), axis=(0, 1))
    noise_seed = int(rng.integers(2 ** 31 - 1)) if aug.scene_noise else scene.noise_seed
    return replace(scene, part_grid=grid, noise_seed=noise_seed)


def _augment_image(image: torch.Tensor, aug: AugConfig, rng: np.random.Generator) -> torch.Tensor:
    """Random resized crop, horizontal flip, and brightness/contrast jitter."""
    if image.ndim != 3:
        raise DataError("image views expect (C, H, W) tensors")
    out = image
    _, h, w = image.shape
    if aug.crop_min < 1.0 or aug.crop_max < 1.0:
        for attempt in range(10):
            area = rng.uniform(aug.crop_min, aug.crop_max) * h * w
            ratio = float(np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3))))
            ch = int(round(np.sqrt(area / ratio)))
            cw = int(round(np.sqrt(area * ratio)))
            if 1 <= ch <= h and 1 <= cw <= w:
                top = int(rng.integers(0, h - ch + 1))
                left = int(rng.integers(0, w - cw + 1))
                crop = out[:, top: top + ch, left: left + cw]
                out = torch.nn.functional.interpolate(
                    crop.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
                ).squeeze(0)
                break
        else:
            raise DataError("crop sampling failed 10 times; widen the crop range")
    if aug.flip_prob > 0 and rng.random() < aug.flip_prob:
        out = torch.flip(out, dims=[-1])
    if aug.jitter > 0:
        brightness = 1.0 + float(rng.uniform(-aug.jitter, aug.jitter))
        contrast = 1.0 + float(rng.uniform(-aug.jitter, aug.jitter))
        mean = out.mean()
        out = ((out * brightness) - mean) * contrast + mean
    return out


def load_dataset(cfg: DataConfig, grid_size: int, input_size: int = 224, seed: int = 0):
    """Materialize the configured dataset.

    Returns (instances, labels) where instances is a list of SyntheticScene
    or (instance_id, image tensor) pairs, and labels maps instance id to
    class id.
    """
    cfg.validate()
    if cfg.kind == "synthetic":
        scenes = synthetic_dataset(cfg.n_classes, (cfg.parts_min, cfg.parts_max),
                                   cfg.instances_per_class, seed=seed, grid_size=grid_size)
        return scenes, {s.instance_id: s.class_id for s in scenes}
    rows = load_index(cfg.index_path)
    images, labels = [], {}
    for instance_id, path, class_id in rows:
        images.append((instance_id, _load_image(path, input_size)))
        labels[instance_id] = class_id
    return images, labels


def _load_image(path: str, input_size: int) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB").resize((input_size, input_size))
        array = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1)
