"""Per-task mask machinery: masked gradients, harmony scoring, sparse mask
initialisation, flip schedule, mask update, diagnostics and mask files.

Masks are boolean numpy vectors over the flat parameter coordinates. Scoring
functions work on plain arrays so they can be checked against brute-force
reimplementations; ``collect_gradients`` is the only place a model is run.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, DataError

FISHER_EPS = 1e-8
DEFAULT_LAMBDA = 10.0
DEFAULT_THRESH = 25
IMPORTANCE_KINDS = ("magnitude", "fisher")

LossGrad = Callable[[int, np.ndarray], tuple[float, np.ndarray]]


# ---------------------------------------------------------------------------
# Budget arithmetic


def removed_count(n: int, sparsity: float) -> int:
    """Number of inactive coordinates, ``S*n`` rounded half up."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigurationError(f"sparsity must lie in [0, 1), got {sparsity}")
    return int(math.floor(sparsity * n + 0.5))


def active_count(n: int, sparsity: float) -> int:
    return n - removed_count(n, sparsity)


def as_mask(bits, n: int | None = None) -> np.ndarray:
    m = np.asarray(bits)
    if m.ndim != 1:
        raise ConfigurationError("a mask must be one-dimensional")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ConfigurationError("mask entries must be 0 or 1")
        m = m.astype(bool)
    if n is not None and m.size != n:
        raise ConfigurationError(f"mask length {m.size} != parameter length {n}")
    return m


def _stack(vectors, name: str) -> np.ndarray:
    if len(vectors) == 0:
        raise ConfigurationError(f"{name}: need at least one vector")
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name}: vectors must share one length")
    return arr


# ---------------------------------------------------------------------------
# Gradients


def masked_gradient(loss_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
                    theta, mask) -> tuple[float, np.ndarray]:
    """Loss at ``theta*mask`` and its gradient, zeroed outside the mask.

    ``loss_grad`` maps effective parameter values to (loss, gradient).
    """
    theta = np.asarray(theta, dtype=np.float64)
    mask = as_mask(mask, theta.size)
    loss, grad = loss_grad(theta * mask)
    return float(loss), np.asarray(grad, dtype=np.float64) * mask


@dataclass
class TaskGradients:
    """One scoring round's gradients for a single task."""

    loss: float
    grad: np.ndarray
    masked_loss: float
    masked_grad: np.ndarray


def collect_gradients(loss_grad: LossGrad, theta, masks: Sequence[np.ndarray]) -> list[TaskGradients]:
    """Unmasked and masked loss/gradient for every task.

    ``loss_grad(i, values)`` evaluates task ``i`` at the given effective
    parameters; ``masks[i]`` is the mask that task trains under.
    """
    theta = np.asarray(theta, dtype=np.float64)
    out = []
    for i, mask in enumerate(masks):
        loss, grad = loss_grad(i, theta)
        m_loss, m_grad = masked_gradient(lambda v, i=i: loss_grad(i, v), theta, mask)
        out.append(TaskGradients(float(loss), np.asarray(grad, dtype=np.float64), m_loss, m_grad))
    return out


# ---------------------------------------------------------------------------
# Scores


def agreement_score(masked_grads, i: int) -> np.ndarray:
    """Task ``i``'s masked gradient times the mean masked gradient."""
    g = _stack(masked_grads, "agreement_score")
    if not 0 <= i < len(g):
        raise ConfigurationError(f"task index {i} out of range")
    return g[i] * g.mean(axis=0)


def magnitude_importance(theta, mask) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.abs(theta * as_mask(mask, theta.size))


def fisher_importance(loss: float, grad, mask, eps: float = FISHER_EPS) -> tuple[np.ndarray, bool]:
    """Squared masked gradient of ``log L``; returns (scores, clamped).

    Losses at or below ``eps`` are replaced by ``eps`` and reported.
    """
    grad = np.asarray(grad, dtype=np.float64)
    clamped = not loss > eps
    denom = eps if clamped else loss
    return ((grad / denom) * as_mask(mask, grad.size)) ** 2, clamped


def importance_score(kind: str, *, theta=None, mask=None, loss=None, grad=None,
                     eps: float = FISHER_EPS) -> tuple[np.ndarray, bool]:
    if kind == "magnitude":
        return magnitude_importance(theta, mask), False
    if kind == "fisher":
        return fisher_importance(loss, grad, mask, eps)
    raise ConfigurationError(f"importance kind must be one of {IMPORTANCE_KINDS}, got {kind!r}")


@dataclass
class HarmonyReport:
    agreement: np.ndarray
    importance: np.ndarray
    harmony: np.ndarray
    owner: object = None
    clamped: bool = False


def harmony_score(agreement, importance, mask, lam: float = DEFAULT_LAMBDA, owner=None,
                  clamped: bool = False) -> HarmonyReport:
    agreement = np.asarray(agreement, dtype=np.float64)
    importance = np.asarray(importance, dtype=np.float64)
    mask = as_mask(mask, agreement.size)
    if importance.shape != agreement.shape:
        raise ConfigurationError("agreement and importance lengths differ")
    h = np.full(agreement.shape, np.inf)
    h[mask] = agreement[mask] + lam * importance[mask]
    return HarmonyReport(agreement, importance, h, owner, clamped)


# ---------------------------------------------------------------------------
# Selection


@dataclass
class Selection:
    indicator: np.ndarray
    shortfall: int

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.indicator)


def _select(scores, k: int, largest: bool) -> Selection:
    s = np.asarray(scores, dtype=np.float64)
    if k < 0:
        raise ConfigurationError("k must be non-negative")
    eligible = np.flatnonzero(np.isfinite(s))
    take = min(k, eligible.size)
    key = -s[eligible] if largest else s[eligible]
    # stable sort keeps the lowest index first among equal scores
    chosen = eligible[np.argsort(key, kind="stable")[:take]]
    ind = np.zeros(s.size, dtype=bool)
    ind[chosen] = True
    return Selection(ind, k - take)


def arg_btm_k(scores, k: int) -> Selection:
    """The ``k`` smallest finite entries; ties go to the lowest index."""
    return _select(scores, k, largest=False)


def arg_top_k(scores, k: int) -> Selection:
    """The ``k`` largest finite entries; ties go to the lowest index."""
    return _select(scores, k, largest=True)


# ---------------------------------------------------------------------------
# Mask update


@dataclass
class FlipRecord:
    owner: object
    requested: int
    removed: np.ndarray
    added: np.ndarray
    shortfall: int
    clamped: bool = False

    @property
    def n_removed(self) -> int:
        return int(self.removed.size)

    @property
    def n_added(self) -> int:
        return int(self.added.size)


def flip_mask(mask, harmony, recovery, alpha: int, owner=None) -> tuple[np.ndarray, FlipRecord]:
    """Drop the ``alpha`` lowest-harmony active bits, then revive as many
    previously inactive bits with the highest recovery score.

    The flip count is capped so the revival can always match the removal,
    which keeps the popcount fixed; any cap shows up as ``shortfall``.
    """
    mask = as_mask(mask)
    harmony = np.asarray(harmony, dtype=np.float64)
    recovery = np.asarray(recovery, dtype=np.float64)
    if harmony.size != mask.size or recovery.size != mask.size:
        raise ConfigurationError("mask, harmony and recovery lengths differ")
    if alpha < 0:
        raise ConfigurationError("alpha must be non-negative")
    h = np.where(mask, harmony, np.inf)
    candidates = np.where(mask, -np.inf, recovery)
    n_revivable = int(np.isfinite(candidates).sum())
    k = min(alpha, n_revivable)
    drop = arg_btm_k(h, k)
    k_removed = int(drop.indicator.sum())
    grow = arg_top_k(candidates, k_removed)
    new = mask.copy()
    new[drop.indicator] = False
    new[grow.indicator] = True
    record = FlipRecord(owner, alpha, drop.indices, grow.indices, alpha - k_removed)
    return new, record


def mean_masked_gradient(grads: Sequence[TaskGradients]) -> np.ndarray:
    return _stack([g.masked_grad for g in grads], "mean_masked_gradient").mean(axis=0)


def task_harmony(i: int, masks, theta, grads: Sequence[TaskGradients], lam: float = DEFAULT_LAMBDA,
                 importance: str = "fisher") -> HarmonyReport:
    g = grads[i]
    agreement = g.masked_grad * mean_masked_gradient(grads)
    imp, clamped = importance_score(importance, theta=theta, mask=masks[i], loss=g.masked_loss,
                                    grad=g.masked_grad)
    return harmony_score(agreement, imp, masks[i], lam, owner=i, clamped=clamped)


def mask_update(i: int, masks, theta, grads: Sequence[TaskGradients], alpha: int,
                lam: float = DEFAULT_LAMBDA, importance: str = "fisher") -> tuple[np.ndarray, FlipRecord]:
    """One task's mask after removal by harmony and recovery by
    ``g_i * mean(masked g)`` over the coordinates inactive before the call."""
    report = task_harmony(i, masks, theta, grads, lam, importance)
    recovery = grads[i].grad * mean_masked_gradient(grads)
    new, rec = flip_mask(masks[i], report.harmony, recovery, alpha, owner=i)
    rec.clamped = report.clamped
    return new, rec


def update_all_masks(masks, theta, grads: Sequence[TaskGradients], alpha: int,
                     lam: float = DEFAULT_LAMBDA, importance: str = "fisher"):
    """Update every task mask from one shared scoring round."""
    results = [mask_update(i, masks, theta, grads, alpha, lam, importance) for i in range(len(masks))]
    return [m for m, _ in results], [r for _, r in results]


# ---------------------------------------------------------------------------
# Flip schedule


@dataclass(frozen=True)
class FlipSchedule:
    eta_min: int = 0
    eta_max: int = 100
    total: int = 1_000_000
    interval: int = 5000

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.eta_max:
            raise ConfigurationError("need 0 <= eta_min <= eta_max")
        if self.total < 1 or self.interval < 1:
            raise ConfigurationError("total iterations and update interval must be >= 1")

    def check_budget(self, popcount: int):
        if self.eta_max > popcount:
            raise ConfigurationError(f"eta_max={self.eta_max} exceeds the active budget {popcount}")

    def __call__(self, t: int) -> int:
        return cosine_alpha(t, self.eta_min, self.eta_max, self.total)

    def update_steps(self) -> list[int]:
        """Iterations at which masks change: ``t % interval == 0`` for ``0 < t <= total``."""
        return list(range(self.interval, self.total + 1, self.interval))


def cosine_alpha(t: int, eta_min: int, eta_max: int, total: int) -> int:
    """Full-period cosine flip budget, rounded up.

    The value is rounded to 9 decimals first so that float noise around an
    exact integer cannot push the ceiling up by one.
    """
    if not 0 <= t <= total:
        raise ConfigurationError(f"t={t} outside [0, {total}]")
    v = eta_max + 0.5 * (eta_min - eta_max) * (1.0 + math.cos(2.0 * math.pi * t / total))
    return int(math.ceil(round(v, 9)))


# ---------------------------------------------------------------------------
# ERK initialisation


@dataclass
class ErkAllocation:
    names: list[str]
    sizes: np.ndarray
    counts: np.ndarray
    scale: float
    mask: np.ndarray

    @property
    def densities(self) -> np.ndarray:
        return self.counts / self.sizes


def erk_raw_density(segment) -> float:
    if segment.kind != "linear-weight":
        return 1.0
    return (segment.fan_in + segment.fan_out) / (segment.fan_in * segment.fan_out)


def erk_counts(layout, sparsity: float) -> tuple[np.ndarray, float]:
    """Active count per segment and the solved global scale.

    Non-matrix segments stay dense. Matrix segments get ``scale*raw*size``
    capped at their size; the scale is re-solved after every cap. Integer
    counts come from largest-remainder rounding, ties to the lowest index.
    """
    sizes = np.array([s.size for s in layout], dtype=np.int64)
    total = int(sizes.sum())
    budget = active_count(total, sparsity)
    if budget == total:
        return sizes.copy(), math.inf
    sparse = np.array([s.kind == "linear-weight" for s in layout])
    raw = np.array([erk_raw_density(s) for s in layout])
    # raw density times size is fan_in + fan_out; keep it exact so equal layers tie exactly
    weight = np.array([s.fan_in + s.fan_out if s.kind == "linear-weight" else s.size
                       for s in layout], dtype=np.float64)
    capped = ~sparse
    while True:
        free = ~capped
        rest = budget - sizes[capped].sum()
        if not free.any() or rest < 0:
            raise ConfigurationError(
                f"sparsity {sparsity} cannot be met: dense segments alone hold "
                f"{int(sizes[~sparse].sum())} of the {budget} active coordinates")
        scale = rest / weight[free].sum()
        over = free & (scale * raw >= 1.0)
        if not over.any():
            break
        capped |= over
    exact = np.where(capped, sizes, scale * weight)
    counts = np.where(capped, sizes, np.floor(exact)).astype(np.int64)
    # rounded so float noise cannot overturn the lowest-index tie-break
    frac = np.where(capped, -1.0, np.round(exact - counts, 9))
    left = budget - int(counts.sum())
    order = np.argsort(-frac, kind="stable")
    counts[order[:left]] += 1
    return counts, float(scale)


def erk_init(layout, sparsity: float, seed) -> ErkAllocation:
    """ERK mask: per-segment active counts sampled uniformly without
    replacement, segment by segment from one seeded generator."""
    counts, scale = erk_counts(layout, sparsity)
    sizes = np.array([s.size for s in layout], dtype=np.int64)
    total = int(sizes.sum())
    mask = np.zeros(total, dtype=bool)
    rng = np.random.default_rng(seed)
    for seg, c in zip(layout, counts):
        if c == seg.size:
            mask[seg.offset:seg.offset + seg.size] = True
        elif c > 0:
            mask[seg.offset + rng.choice(seg.size, size=int(c), replace=False)] = True
    return ErkAllocation([s.name for s in layout], sizes, counts, scale, mask)


def random_mask(n: int, sparsity: float, seed) -> np.ndarray:
    """Uniformly random mask with the exact active budget."""
    mask = np.zeros(n, dtype=bool)
    mask[np.random.default_rng(seed).choice(n, size=active_count(n, sparsity), replace=False)] = True
    return mask


# ---------------------------------------------------------------------------
# Diagnostics and voting


def averaged_harmony(grads) -> tuple[float, bool]:
    """Mean sign agreement between each task gradient and the task mean.

    Pairs where either the task entry or the mean entry is zero are skipped.
    Returns ``(0.0, True)`` when every pair is skipped.
    """
    g = _stack(grads, "averaged_harmony")
    mean = g.mean(axis=0)
    s = np.sign(g) * np.sign(mean)
    valid = s != 0
    n = int(valid.sum())
    if n == 0:
        return 0.0, True
    return float(s.sum() / n), False


def vote_unseen_mask(masks, thresh: int = DEFAULT_THRESH) -> np.ndarray:
    """Bit ``j`` is set when strictly more than ``thresh`` masks set it."""
    m = np.asarray([as_mask(x) for x in masks]) if len(masks) else None
    if m is None or m.ndim != 2:
        raise ConfigurationError("need at least one mask, all of one length")
    return m.sum(axis=0) > thresh


# ---------------------------------------------------------------------------
# Mask files: one JSON header line, then comma-separated run lengths that
# alternate starting from the bit named in the header.

MASK_FORMAT = "harmodt-mask-v1"


def encode_runs(mask) -> tuple[int, list[int]]:
    m = as_mask(mask)
    if m.size == 0:
        return 0, []
    edges = np.flatnonzero(m[1:] != m[:-1]) + 1
    bounds = np.concatenate(([0], edges, [m.size]))
    return int(m[0]), np.diff(bounds).tolist()


def decode_runs(first: int, runs: Sequence[int], n: int) -> np.ndarray:
    if first not in (0, 1):
        raise DataError("first bit must be 0 or 1")
    if any(r <= 0 for r in runs) or sum(runs) != n:
        raise DataError(f"run lengths do not add up to {n} positive runs")
    values = (np.arange(len(runs)) + first) % 2 == 1
    return np.repeat(values, runs)


def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def mask_to_text(mask, owner, sparsity: float) -> str:
    m = as_mask(mask)
    first, runs = encode_runs(m)
    header = {"format": MASK_FORMAT, "owner": owner, "sparsity": sparsity,
              "popcount": int(m.sum()), "length": int(m.size), "first": first}
    return json.dumps(header, sort_keys=True) + "\n" + ",".join(map(str, runs)) + "\n"


def mask_from_text(text: str, source: str = "<mask>") -> tuple[np.ndarray, dict]:
    lines = text.split("\n")
    try:
        header = json.loads(lines[0])
        runs = [int(x) for x in lines[1].split(",")] if len(lines) > 1 and lines[1] else []
    except (ValueError, IndexError) as exc:
        raise DataError(f"{source}: malformed mask file ({exc})") from None
    if header.get("format") != MASK_FORMAT:
        raise DataError(f"{source}: unknown mask format {header.get('format')!r}")
    try:
        mask = decode_runs(header["first"], runs, header["length"])
    except KeyError as exc:
        raise DataError(f"{source}: header lacks {exc}") from None
    except DataError as exc:
        raise DataError(f"{source}: {exc}") from None
    if int(mask.sum()) != header.get("popcount"):
        raise DataError(f"{source}: popcount {int(mask.sum())} disagrees with header")
    return mask, header


def save_mask(path, mask, owner, sparsity: float) -> Path:
    path = Path(path)
    _atomic_write_text(path, mask_to_text(mask, owner, sparsity))
    return path


def load_mask(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    return mask_from_text(path.read_text(encoding="utf-8"), str(path))
