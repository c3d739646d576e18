"""Training loop, checkpointing, metric logging, sweeps, and embedding export."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from torch.optim import SGD, Adam
from torch.optim.lr_scheduler import CosineAnnealingLR

from .config import PipelineConfig, apply_overrides
from .data import (AugConfig, SplitSpec, SyntheticScene, build_split, load_dataset,
                   load_split, make_views, scene_count_parts)
from .errors import ConfigurationError, DataError
from .evaluation import ClusterReport, evaluate_embeddings
from .model import Checkpoint, DiscoveryModel, collate_batch, load_checkpoint, model_from_checkpoint


def prepare_data(config: PipelineConfig):
    """Load the configured dataset and its split.

    Returns (instances_by_id, labels, split); the split comes from
    ``data.split_path`` when set, otherwise it is built from the index with
    the pipeline seed.
    """
    instances, labels = load_dataset(config.data, grid_size=config.backbone.grid_size,
                                     input_size=config.backbone.input_size, seed=config.seed)
    if config.data.kind == "synthetic" and config.backbone.kind == "synthetic":
        needed = scene_count_parts(instances)
        if config.backbone.part_vocab < needed:
            raise ConfigurationError(
                f"backbone.part_vocab={config.backbone.part_vocab} below dataset part count {needed}"
            )
    if config.data.split_path:
        split, split_labels = load_split(config.data.split_path)
        missing = set(split.all_ids()) - set(labels)
        if missing:
            raise DataError(f"split references unknown instances, e.g. {sorted(missing)[:3]}")
    else:
        split = build_split(sorted(labels.items()), config.data.known_spec(),
                            config.data.labeled_fraction, seed=config.seed)
    by_id = {}
    for item in instances:
        instance_id = item.instance_id if isinstance(item, SyntheticScene) else item[0]
        by_id[instance_id] = item
    return by_id, labels, split


def _view_payload(item):
    return item if isinstance(item, SyntheticScene) else item[1]


def _collate_views(ids, views):
    if views and isinstance(views[0], SyntheticScene):
        return collate_batch(views)[1]
    return collate_batch(list(zip(ids, views)))[1]


def train(config: PipelineConfig) -> Checkpoint:
    """Run the full training loop and return (and persist) the final checkpoint.

    Every step: two augmented views -> backbone -> clusterer -> decoder
    (reconstruction per view, averaged) -> pooled/fused/projected embeddings
    -> contrastive losses -> weighted objective -> SGD step on trainable
    parameters. Loss components are recorded per step and logged per epoch.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    model = DiscoveryModel(config)
    by_id, labels, split = prepare_data(config)
    labeled_set = set(split.labeled_ids)
    ids = sorted(by_id)
    if len(ids) < 2:
        raise DataError("need at least two instances to train")

    generator = torch.Generator().manual_seed(config.seed + 1)
    aug = AugConfig.from_data_config(config.data)
    groups = _param_groups(model, config)
    if config.optim.algorithm == "adam":
        optimizer = Adam(groups, weight_decay=config.optim.weight_decay)
    else:
        optimizer = SGD(groups, momentum=config.optim.momentum,
                        weight_decay=config.optim.weight_decay)
    scheduler = (CosineAnnealingLR(optimizer, T_max=config.optim.epochs)
                 if config.optim.schedule == "cosine" else None)

    history = {"steps": [], "epochs": []}
    metrics_path = out_dir / "metrics.log"
    batch_size = config.optim.batch_size
    checkpoint = None
    for epoch in range(1, config.optim.epochs + 1):
        model.train()
        perm = torch.randperm(len(ids), generator=generator).tolist()
        epoch_sums: dict[str, float] = {}
        epoch_steps = 0
        for start in range(0, len(perm), batch_size):
            chunk = [ids[i] for i in perm[start: start + batch_size]]
            if len(chunk) < 2:
                continue
            batch1, batch2, label_t, mask_t = _make_batch(chunk, by_id, labels, labeled_set,
                                                          aug, generator)
            losses = model.compute_losses(batch1, batch2, label_t, mask_t,
                                          generator=generator)
            optimizer.zero_grad()
            losses["objective"].backward()
            optimizer.step()
            record = {k: float(v.detach()) for k, v in losses.items()}
            record["epoch"] = epoch
            history["steps"].append(record)
            for key, value in record.items():
                if key != "epoch":
                    epoch_sums[key] = epoch_sums.get(key, 0.0) + value
            epoch_steps += 1
        if scheduler is not None:
            scheduler.step()
        summary = {key: value / max(epoch_steps, 1) for key, value in epoch_sums.items()}
        summary["epoch"] = epoch
        history["epochs"].append(summary)
        _append_metrics(metrics_path, summary)
        checkpoint = Checkpoint(state_dict=model.state_dict(), config=config,
                                epoch=epoch, history=history)
        _atomic_save(checkpoint, out_dir / "checkpoint.pt")
    return checkpoint


def _param_groups(model: DiscoveryModel, config: PipelineConfig):
    backbone_params = [p for p in model.backbone.parameters() if p.requires_grad]
    backbone_ids = {id(p) for p in backbone_params}
    head_params = [p for p in model.parameters()
                   if p.requires_grad and id(p) not in backbone_ids]
    groups = [{"params": head_params, "lr": config.optim.lr}]
    if backbone_params:
        groups.append({"params": backbone_params,
                       "lr": config.optim.lr * config.optim.backbone_lr_scale})
    return groups


def _make_batch(chunk, by_id, labels, labeled_set, aug, generator):
    view1, view2 = [], []
    for instance_id in chunk:
        seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=generator))
        pair = make_views(_view_payload(by_id[instance_id]), aug, seed, source_id=instance_id)
        view1.append(pair.view1)
        view2.append(pair.view2)
    batch1 = _collate_views(chunk, view1)
    batch2 = _collate_views(chunk, view2)
    label_t = torch.tensor([labels[i] for i in chunk], dtype=torch.long)
    mask_t = torch.tensor([i in labeled_set for i in chunk], dtype=torch.bool)
    return batch1, batch2, label_t, mask_t


def _append_metrics(path: Path, record: dict) -> None:
    keys = ["epoch"] + sorted(k for k in record if k != "epoch")
    line = " ".join(f"{k}={record[k]:.6f}" if k != "epoch" else f"epoch={record[k]}"
                    for k in keys)
    with open(path, "a") as fh:
        fh.write(line + "\n")


def _atomic_save(checkpoint: Checkpoint, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    checkpoint.save(tmp)
    os.replace(tmp, path)


def evaluate_checkpoint(checkpoint: Checkpoint | str | Path, split: SplitSpec | None = None,
                        k: int | None = None, seed: int = 0) -> ClusterReport:
    """Embed every instance with hard selection, cluster, and score the unlabeled set."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = model_from_checkpoint(checkpoint)
    by_id, labels, default_split = prepare_data(checkpoint.config)
    if split is None:
        split = default_split
    if k is None:
        k = len(set(labels.values()))
    instances = [by_id[i] for i in sorted(split.all_ids())]
    embeddings = model.embed_instances(instances, seed=seed)
    return evaluate_embeddings(embeddings, labels, split, k, seed=seed)


def export_embeddings(checkpoint: Checkpoint | str | Path, split: SplitSpec | None = None,
                      out_path: str | Path = "embeddings.csv", seed: int = 0) -> Path:
    """Write ``instance_id,class_id,partition,g_*`` rows for every split instance."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = model_from_checkpoint(checkpoint)
    by_id, labels, default_split = prepare_data(checkpoint.config)
    if split is None:
        split = default_split
    width = 3 * checkpoint.config.backbone.feat_dim
    header = "instance_id,class_id,partition," + ",".join(f"g_{j:04d}" for j in range(width))
    lines = [header]
    instance_ids = sorted(split.all_ids())
    if instance_ids:
        embeddings = model.embed_instances([by_id[i] for i in instance_ids], seed=seed)
        labeled = set(split.labeled_ids)
        for instance_id in instance_ids:
            vec = embeddings[instance_id]
            part = "L" if instance_id in labeled else "U"
            values = ",".join(f"{v:.9g}" for v in vec)
            lines.append(f"{instance_id},{labels[instance_id]},{part},{values}")
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def load_embeddings(path: str | Path):
    """Read an exported embedding file back into memory.

    Returns (embeddings, labels, partitions) keyed by instance id.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("instance_id,class_id,partition"):
        raise DataError(f"malformed embedding file {path}")
    embeddings, labels, partitions = {}, {}, {}
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = line.split(",")
        instance_id, class_id, part = fields[0], int(fields[1]), fields[2]
        embeddings[instance_id] = np.array([np.float32(v) for v in fields[3:]], dtype=np.float32)
        labels[instance_id] = class_id
        partitions[instance_id] = part
    return embeddings, labels, partitions


def parse_grid(path: str | Path) -> list[list[str]]:
    """Read a sweep grid: one configuration of space-separated key=value per line."""
    rows = []
    for line in Path(path).read_text().splitlines():
        text = line.split("#", 1)[0].strip()
        if text:
            rows.append(text.split())
    if not rows:
        raise DataError(f"empty sweep grid {path}")
    return rows


def sweep(config: PipelineConfig, grid: list[list[str]], seed: int = 0):
    """Train and evaluate one run per grid point.

    Returns a list of (overrides, ClusterReport) rows in grid order; each run
    writes under ``<out_dir>/sweep-NN``.
    """
    results = []
    for i, overrides in enumerate(grid):
        run_cfg = apply_overrides(config, overrides)
        run_cfg.out_dir = str(Path(config.out_dir) / f"sweep-{i:02d}")
        checkpoint = train(run_cfg)
        report = evaluate_checkpoint(checkpoint, seed=seed)
        results.append((overrides, report))
    return results
