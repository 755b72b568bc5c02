"""Task grouping: harmony-matrix clustering, group masks and their update.

Group ids are 0-based and dense. Per-task gradients passed in here must have
been computed under the mask of the group the task belongs to.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .exceptions import ConfigurationError, DataError
from .harmony import (DEFAULT_LAMBDA, FISHER_EPS, FlipRecord, HarmonyReport, TaskGradients,
                      _atomic_write_text, arg_btm_k, as_mask, fisher_importance, flip_mask,
                      harmony_score, removed_count)

ASSIGNMENT_FORMAT = "harmodt-groups-v1"
PROJECTION_DIM = 512


@dataclass
class GroupAssignment:
    """Total mapping from task id to group id with no empty group."""

    groups: dict[int, int]
    n_groups: int
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.groups = {int(t): int(g) for t, g in self.groups.items()}
        if self.n_groups < 1:
            raise ConfigurationError("need at least one group")
        used = set(self.groups.values())
        if used != set(range(self.n_groups)):
            missing = sorted(set(range(self.n_groups)) - used)
            extra = sorted(used - set(range(self.n_groups)))
            raise ConfigurationError(f"group ids must cover 0..{self.n_groups - 1} exactly "
                                     f"(empty: {missing}, out of range: {extra})")

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.groups)

    def members(self, j: int) -> list[int]:
        return [t for t in self.task_ids if self.groups[t] == j]

    def labels(self, task_ids: Sequence[int] | None = None) -> np.ndarray:
        ids = self.task_ids if task_ids is None else task_ids
        return np.array([self.groups[t] for t in ids], dtype=np.int64)

    def to_json(self) -> str:
        doc = {"format": ASSIGNMENT_FORMAT, "n_groups": self.n_groups, "seed": self.seed,
               "groups": {str(t): self.groups[t] for t in self.task_ids}, "meta": self.meta}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, source: str = "<assignment>") -> "GroupAssignment":
        try:
            doc = json.loads(text)
            if doc.get("format") != ASSIGNMENT_FORMAT:
                raise DataError(f"{source}: unknown format {doc.get('format')!r}")
            return cls({int(t): int(g) for t, g in doc["groups"].items()}, int(doc["n_groups"]),
                       doc.get("seed"), doc.get("meta", {}))
        except (ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{source}: malformed group assignment ({exc})") from None

    def save(self, path) -> Path:
        path = Path(path)
        _atomic_write_text(path, self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "GroupAssignment":
        path = Path(path)
        return cls.from_json(path.read_text(encoding="utf-8"), str(path))


def _index_groups(labels, n_tasks: int) -> tuple[np.ndarray, int]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_tasks,):
        raise ConfigurationError(f"need one group label per task ({n_tasks})")
    n_groups = int(labels.max()) + 1
    if set(labels.tolist()) != set(range(n_groups)):
        raise ConfigurationError("every group must contain at least one task")
    return labels, n_groups


def group_sums(masked_grads, labels) -> np.ndarray:
    """Row ``j`` is the sum of the masked gradients of group ``j``'s tasks."""
    g = np.asarray(masked_grads, dtype=np.float64)
    labels, n_groups = _index_groups(labels, len(g))
    out = np.zeros((n_groups, g.shape[1]))
    for i, j in enumerate(labels):
        out[j] += g[i]
    return out


def group_agreement(masked_grads, labels, j: int) -> np.ndarray:
    """Group ``j``'s summed masked gradient times the mean of all group sums."""
    sums = group_sums(masked_grads, labels)
    if not 0 <= j < len(sums):
        raise ConfigurationError(f"group {j} does not exist")
    return sums[j] * sums.mean(axis=0)


def group_importance(losses, grads, mask, eps: float = FISHER_EPS) -> tuple[np.ndarray, bool]:
    """Squared masked gradient of ``log`` of the summed member losses."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or len(grads) == 0:
        raise ConfigurationError("group_importance needs one gradient per member task")
    return fisher_importance(float(np.sum(losses)), grads.sum(axis=0), mask, eps)


def group_harmony(j: int, labels, mask, grads: Sequence[TaskGradients],
                  lam: float = DEFAULT_LAMBDA) -> HarmonyReport:
    labels = np.asarray(labels)
    masked = np.array([g.masked_grad for g in grads])
    agreement = group_agreement(masked, labels, j)
    members = np.flatnonzero(labels == j)
    imp, clamped = group_importance([grads[i].masked_loss for i in members], masked[members], mask)
    return harmony_score(agreement, imp, mask, lam, owner=j, clamped=clamped)


def harmony_matrix(grads: Sequence[TaskGradients], lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Row ``i``: task ``i``'s harmony under an all-ones mask with every task
    treated as its own group. Expects gradients taken with all-ones masks."""
    g = np.array([x.masked_grad for x in grads])
    if g.ndim != 2 or len(g) == 0:
        raise ConfigurationError("harmony_matrix needs at least one task")
    ones = np.ones(g.shape[1], dtype=bool)
    rows = []
    for i, x in enumerate(grads):
        imp, _ = fisher_importance(x.masked_loss, x.masked_grad, ones)
        rows.append(g[i] * g.mean(axis=0) + lam * imp)
    return np.array(rows)


# ---------------------------------------------------------------------------
# Clustering


def _normalise_rows(h: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    return np.divide(h, norms, out=np.zeros_like(h), where=norms > 0)


def project_rows(h: np.ndarray, dim: int, seed) -> tuple[np.ndarray, np.ndarray | None]:
    """Keep a seeded random subset of ``dim`` coordinates when rows are longer."""
    if h.shape[1] <= dim:
        return h, None
    cols = np.sort(np.random.default_rng(seed).choice(h.shape[1], size=dim, replace=False))
    return h[:, cols], cols


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Renumber groups by first appearance in task order."""
    order = {}
    for lab in labels.tolist():
        order.setdefault(lab, len(order))
    return np.array([order[lab] for lab in labels.tolist()], dtype=np.int64)


def repair_empty(points: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Fill empty groups by moving the member farthest from its centroid
    out of the currently largest group (ties to the lowest index)."""
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=n_groups)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        centre = points[members].mean(axis=0)
        dist = np.linalg.norm(points[members] - centre, axis=1)
        labels[members[int(np.argmax(dist))]] = int(empty[0])


def cluster_rows(h, n_groups: int, seed: int, *, n_init: int = 10,
                 project_dim: int | None = PROJECTION_DIM) -> tuple[np.ndarray, dict]:
    """k-means over l2-normalised rows; returns canonical labels and metadata."""
    h = np.asarray(h, dtype=np.float64)
    n = len(h)
    if not 1 <= n_groups <= n:
        raise ConfigurationError(f"group count {n_groups} must lie in [1, {n}]")
    meta = {"method": "kmeans", "n_init": n_init, "normalise": "l2"}
    if n_groups == n:
        return np.arange(n, dtype=np.int64), {**meta, "forced": "singletons"}
    if n_groups == 1:
        return np.zeros(n, dtype=np.int64), {**meta, "forced": "single"}
    if project_dim is not None:
        h, cols = project_rows(h, project_dim, seed)
        meta["projection"] = None if cols is None else {"dim": project_dim, "seed": seed}
    x = _normalise_rows(h)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=n_groups, n_init=n_init, random_state=seed).fit(x)
    labels = repair_empty(x, km.labels_.astype(np.int64), n_groups)
    meta["inertia"] = float(kmeans_objective(x, labels))
    return _canonical(labels), meta


def kmeans_objective(points, labels) -> float:
    """Sum of squared distances to each group's centroid."""
    points = np.asarray(points, dtype=np.float64)
    total = 0.0
    for j in np.unique(labels):
        p = points[labels == j]
        total += float(((p - p.mean(axis=0)) ** 2).sum())
    return total


def assign_groups(task_ids: Sequence[int], grads: Sequence[TaskGradients], n_groups: int,
                  lam: float = DEFAULT_LAMBDA, seed: int = 0,
                  project_dim: int | None = PROJECTION_DIM) -> tuple[GroupAssignment, np.ndarray]:
    """Cluster tasks by their harmony rows; returns the assignment and the matrix."""
    h = harmony_matrix(grads, lam)
    labels, meta = cluster_rows(h, n_groups, seed, project_dim=project_dim)
    meta["lambda"] = lam
    return GroupAssignment(dict(zip(task_ids, labels.tolist())), n_groups, seed, meta), h


# ---------------------------------------------------------------------------
# Group masks


def init_group_masks(labels, h, sparsity: float) -> list[np.ndarray]:
    """Each group drops the coordinates with the lowest summed member harmony."""
    h = np.asarray(h, dtype=np.float64)
    labels, n_groups = _index_groups(labels, len(h))
    k = removed_count(h.shape[1], sparsity)
    masks = []
    for j in range(n_groups):
        drop = arg_btm_k(h[labels == j].sum(axis=0), k)
        if drop.shortfall:
            raise ConfigurationError(f"group {j}: only {k - drop.shortfall} finite harmony "
                                     f"entries for {k} removals")
        masks.append(~drop.indicator)
    return masks


def group_mask_update(labels, masks, grads: Sequence[TaskGradients], alpha: int,
                      lam: float = DEFAULT_LAMBDA) -> tuple[list[np.ndarray], list[FlipRecord]]:
    """Flip every group mask from one scoring round of per-task gradients."""
    labels = np.asarray(labels)
    masked = np.array([g.masked_grad for g in grads])
    plain = np.array([g.grad for g in grads])
    _, n_groups = _index_groups(labels, len(grads))
    if len(masks) != n_groups:
        raise ConfigurationError(f"{len(masks)} masks for {n_groups} groups")
    mean_sum = group_sums(masked, labels).mean(axis=0)
    new_masks, records = [], []
    for j in range(n_groups):
        mask = as_mask(masks[j], masked.shape[1])
        report = group_harmony(j, labels, mask, grads, lam)
        recovery = plain[labels == j].sum(axis=0) * mean_sum
        new, rec = flip_mask(mask, report.harmony, recovery, alpha, owner=j)
        rec.clamped = report.clamped
        new_masks.append(new)
        records.append(rec)
    return new_masks, records
