"""Clustering evaluation: semi-supervised k-means and Hungarian accuracy.

All embeddings are clustered jointly; labeled instances stay pinned to their
class's cluster throughout. Accuracy on the unlabeled set comes from a
maximum-weight matching between predicted clusters and ground-truth classes,
reported over all instances and separately for old and new classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, DataError


@dataclass
class ClusterReport:
    """Assignments plus All/Old/New accuracies after Hungarian matching."""

    assignments: dict[str, int]
    acc_all: float
    acc_old: float
    acc_new: float
    matching: dict[int, int] = field(default_factory=dict)

    def to_record(self) -> str:
        """Key=value lines, one metric per line."""
        lines = [f"acc_all={self.acc_all:.6f}",
                 f"acc_old={self.acc_old:.6f}",
                 f"acc_new={self.acc_new:.6f}",
                 "matching=" + ";".join(f"{c}:{k}" for c, k in sorted(self.matching.items())),
                 f"n_instances={len(self.assignments)}"]
        return "\n".join(lines)

    def save_assignments(self, path: str | Path) -> None:
        lines = ["instance_id,cluster_id"]
        lines += [f"{i},{c}" for i, c in sorted(self.assignments.items())]
        Path(path).write_text("\n".join(lines) + "\n")


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * x @ centers.T
    return np.maximum(d2, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Standard k-means++ seeding over the rows of x."""
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(len(x))]
    d2 = _squared_distances(x, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(len(x))]
        else:
            centers[j] = x[rng.choice(len(x), p=d2 / total)]
        d2 = np.minimum(d2, _squared_distances(x, centers[j: j + 1]).ravel())
    return centers


def ss_kmeans(embeddings: Mapping[str, np.ndarray], labeled: Mapping[str, int], k: int,
              seed: int = 0, max_iter: int = 100, tol: float = 1e-4,
              n_restarts: int = 10, trace: list | None = None) -> dict[str, int]:
    """Constrained k-means: labeled instances are pinned to their class cluster.

    Known classes (sorted) occupy clusters 0..n_known-1, initialized from the
    labeled means; the remaining clusters are seeded by k-means++ over the
    unlabeled points. An empty cluster is re-seeded from the unlabeled point
    farthest from its current centroid. The best of ``n_restarts`` seedings
    (by final constrained objective) wins. ``trace``, when given, receives
    the winning run's objective value after each update step.
    """
    ids = sorted(embeddings)
    if not ids:
        raise DataError("no embeddings to cluster")
    x = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    known = sorted(set(labeled.values()))
    if k < len(known):
        raise ConfigurationError(f"k={k} below known class count {len(known)}")
    class_to_cluster = {c: j for j, c in enumerate(known)}
    pinned = np.full(len(ids), -1, dtype=np.int64)
    for row, instance_id in enumerate(ids):
        if instance_id in labeled:
            pinned[row] = class_to_cluster[labeled[instance_id]]
    free = np.where(pinned < 0)[0]

    known_centers = np.zeros((len(known), x.shape[1]))
    for c, j in class_to_cluster.items():
        members = x[pinned == j]
        if len(members) == 0:
            raise DataError(f"known class {c} has no labeled instances")
        known_centers[j] = members.mean(0)
    n_novel = k - len(known)
    if n_novel > 0 and len(free) == 0:
        raise DataError("novel clusters requested but no unlabeled points exist")

    rng = np.random.default_rng(seed)
    best: tuple[float, np.ndarray, list] | None = None
    for _ in range(max(n_restarts, 1) if n_novel > 0 else 1):
        centers = np.zeros((k, x.shape[1]))
        centers[: len(known)] = known_centers
        if n_novel > 0:
            centers[len(known):] = _kmeans_pp(x[free], n_novel, rng)
        assign, run_trace = _lloyd(x, pinned, free, centers, k, max_iter, tol)
        objective = run_trace[-1]
        if best is None or objective < best[0]:
            best = (objective, assign, run_trace)
    if trace is not None:
        trace.extend(best[2])
    return {instance_id: int(best[1][row]) for row, instance_id in enumerate(ids)}


def _lloyd(x, pinned, free, centers, k, max_iter, tol):
    """Constrained Lloyd iterations; returns assignments and objective trace."""
    assign = pinned.copy()
    if len(free) == 0:
        residual = x - centers[assign]
        return assign, [float((residual * residual).sum())]
    trace = []
    for _ in range(max_iter):
        d2 = _squared_distances(x[free], centers)
        assign[free] = d2.argmin(1)
        # re-seed empty clusters from the farthest unlabeled point
        counts = np.bincount(assign, minlength=k)
        reseeded: set[int] = set()
        for cluster in np.where(counts == 0)[0]:
            candidates = np.array([r for r in free if r not in reseeded])
            if len(candidates) == 0:
                break
            gaps = _squared_distances(x[candidates], centers)[np.arange(len(candidates)),
                                                              assign[candidates]]
            farthest = int(candidates[gaps.argmax()])
            assign[farthest] = cluster
            reseeded.add(farthest)
        new_centers = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members) > 0:
                new_centers[j] = members.mean(0)
        shift = np.linalg.norm(new_centers - centers, axis=1).max()
        centers = new_centers
        residual = x - centers[assign]
        trace.append(float((residual * residual).sum()))
        if shift < tol:
            break
    return assign, trace


def evaluate_embeddings(embeddings: Mapping[str, np.ndarray], labels: Mapping[str, int],
                        split, k: int, seed: int = 0,
                        normalize: bool = True) -> ClusterReport:
    """Cluster all embeddings with labeled pins, then score the unlabeled subset.

    ``normalize`` projects embeddings to the unit sphere before clustering,
    the usual preprocessing for discovery evaluation.
    """
    if normalize:
        embeddings = {i: (v := np.asarray(e, dtype=np.float64)) / max(np.linalg.norm(v), 1e-12)
                      for i, e in embeddings.items()}
    labeled = {i: labels[i] for i in split.labeled_ids}
    assignments = ss_kmeans(embeddings, labeled, k, seed=seed)
    pred = {i: assignments[i] for i in split.unlabeled_ids}
    truth = {i: labels[i] for i in split.unlabeled_ids}
    report = hungarian_accuracy(pred, truth, split.known_classes)
    report.assignments = assignments
    return report


def hungarian_accuracy(pred: Mapping[str, int], truth: Mapping[str, int],
                       old_classes) -> ClusterReport:
    """Score predicted clusters against ground truth on the unlabeled set.

    Builds the cluster-by-class contingency matrix, solves the maximum-weight
    assignment, and counts an instance correct iff its (cluster, class) cell
    is matched. Old/new accuracies restrict to instances whose true class is
    inside/outside ``old_classes``.
    """
    if not pred:
        raise DataError("empty prediction set")
    if set(pred) != set(truth):
        raise DataError("prediction and truth must cover the same instance ids")
    old_classes = set(old_classes)
    clusters = sorted(set(pred.values()))
    classes = sorted(set(truth.values()))
    cluster_idx = {c: i for i, c in enumerate(clusters)}
    class_idx = {c: i for i, c in enumerate(classes)}
    w = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    for instance_id, cluster in pred.items():
        w[cluster_idx[cluster], class_idx[truth[instance_id]]] += 1
    rows, cols = linear_sum_assignment(w, maximize=True)
    matching = {clusters[r]: classes[c] for r, c in zip(rows, cols)}

    totals = {"all": 0, "old": 0, "new": 0}
    correct = {"all": 0, "old": 0, "new": 0}
    for instance_id, cluster in pred.items():
        true_class = truth[instance_id]
        group = "old" if true_class in old_classes else "new"
        hit = int(matching.get(cluster) == true_class)
        for g in ("all", group):
            totals[g] += 1
            correct[g] += hit
    def ratio(g):
        return correct[g] / totals[g] if totals[g] else 0.0
    return ClusterReport(assignments=dict(pred), acc_all=ratio("all"),
                         acc_old=ratio("old"), acc_new=ratio("new"), matching=matching)
