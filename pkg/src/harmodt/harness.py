"""End-to-end runs: data preparation, the three training loops, evaluation
protocols, run directories and exports.

Randomness is split into independent streams keyed by purpose so that extra
bookkeeping (scoring rounds, logging) never perturbs the training trace.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MaskedAdam, ParamVector
from .config import RunConfig, parse_config_text
from .exceptions import ConfigurationError, DataError, StateError
from .gating import GatingClassifier, GatingReport, rollout_and_identify, train_gating
from .grouping import GroupAssignment, assign_groups, group_mask_update, init_group_masks
from .harmony import (FlipSchedule, TaskGradients, active_count, averaged_harmony, collect_gradients,
                      erk_init, load_mask, save_mask, update_all_masks, vote_unseen_mask)
from .policy import PolicyConfig, WindowSampler, dt_loss_and_grad, init_policy, rollout
from .taskenv import OfflineDataset, TaskSpec, generate_suite, load_suite, make_suite, save_suite

log = logging.getLogger(__name__)

PROTOCOLS = ("provided", "agnostic", "unseen")

# stream ids for np.random.default_rng([seed, STREAM, ...])
INIT, SAMPLE, DROPOUT, SCORE, MASK, EVAL, GATING, CLUSTER = range(8)


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *extra])


def _seed_of(seed: int, stream: int, *extra: int) -> int:
    return int(_rng(seed, stream, *extra).integers(2**63))


# ---------------------------------------------------------------------------
# Data


def suite_tasks(cfg: RunConfig) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """(training tasks, held-out tasks) for the configured suite."""
    tasks = make_suite(cfg.suite)
    ids = {t.task_id for t in tasks}
    held = set(cfg.held_out_ids)
    if not held <= ids:
        raise ConfigurationError(f"held-out ids {sorted(held - ids)} are not in suite {cfg.suite}")
    train = [t for t in tasks if t.task_id not in held]
    if not train:
        raise ConfigurationError("every task is held out")
    return train, [t for t in tasks if t.task_id in held]


def prepare_data(cfg: RunConfig, overwrite: bool = False) -> Path:
    """Generate and save datasets for every task of the suite (idempotent)."""
    root = Path(cfg.data_dir)
    tasks = make_suite(cfg.suite)
    try:
        existing = load_suite(root, cfg.suite)
        if not overwrite and all(
                ds.quality == cfg.quality and ds.n_traj == cfg.n_traj and ds.seed == cfg.data_seed
                for ds in existing.values()) and len(existing) == len(tasks):
            return root / cfg.suite
    except DataError:
        pass
    return save_suite(root, cfg.suite, generate_suite(tasks, cfg.quality, cfg.n_traj, cfg.data_seed))


def load_datasets(cfg: RunConfig, task_ids: Sequence[int] | None = None) -> dict[int, OfflineDataset]:
    return load_suite(Path(cfg.data_dir), cfg.suite, task_ids)


def policy_config(cfg: RunConfig, datasets: dict[int, OfflineDataset]) -> PolicyConfig:
    ds = next(iter(datasets.values()))
    return PolicyConfig(state_dim=ds.state_dim, action_dim=ds.action_dim, embed_dim=cfg.embed_dim,
                        n_layer=cfg.n_layer, n_head=cfg.n_head, context=cfg.K,
                        prompt_len=cfg.K_star, dropout=cfg.dropout, activation=cfg.activation)


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsLog:
    """Append-only list of per-interval records with a fixed key set."""

    records: list[dict] = field(default_factory=list)

    KEYS = ("iteration", "phase", "alpha", "avg_harmony", "harmony_degenerate", "loss_mean",
            "loss_per_task", "popcount", "removed", "added", "shortfall", "fisher_clamped")

    def append(self, **record):
        missing = set(self.KEYS) ^ set(record)
        if missing:
            raise StateError(f"metrics record keys differ from schema: {sorted(missing)}")
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise StateError("metrics records must have increasing iterations")
        self.records.append({k: record[k] for k in self.KEYS})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsLog":
        out = cls()
        for line in text.splitlines():
            if line.strip():
                out.records.append(json.loads(line))
        return out

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]


# ---------------------------------------------------------------------------
# Training


@dataclass
class RunResult:
    config: RunConfig
    task_ids: list[int]
    params: ParamVector
    init_params: ParamVector
    masks: list[np.ndarray] | None
    owners: list[str]
    log: MetricsLog
    ever_active: np.ndarray
    targets: dict[int, float]
    assignment: GroupAssignment | None = None
    gating: GatingClassifier | None = None
    gating_report: GatingReport | None = None
    complete: bool = True

    def mask_for(self, task_id: int) -> np.ndarray | None:
        """Mask a known task trains and is evaluated under."""
        if self.masks is None:
            return None
        if self.assignment is not None:
            return self.masks[self.assignment.groups[task_id]]
        return self.masks[self.task_ids.index(task_id)]


class _Trainer:
    """Shared inner loop: uniform task sampling, masked Adam steps, and a
    scoring round every ``t_m`` steps."""

    def __init__(self, cfg: RunConfig, datasets: dict[int, OfflineDataset]):
        self.cfg = cfg
        self.task_ids = sorted(datasets)
        self.datasets = datasets
        self.pcfg = policy_config(cfg, datasets)
        self.sampler = WindowSampler(datasets, self.pcfg)
        self.params = init_policy(self.pcfg, _seed_of(cfg.seed, INIT))
        self.init_params = self.params.copy()
        self.opt = MaskedAdam(len(self.params), lr=cfg.lr)
        self.sample_rng = _rng(cfg.seed, SAMPLE)
        self.log = MetricsLog()
        self.ever_active = np.zeros(len(self.params), dtype=bool)
        self._losses: dict[int, list[float]] = {t: [] for t in self.task_ids}

    def task_mask(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, t: int):
        i = int(self.sample_rng.integers(len(self.task_ids)))
        task = self.task_ids[i]
        batch = self.sampler.sample(task, self.cfg.batch_size, self.sample_rng)
        mask = self.task_mask(i)
        loss, grad = dt_loss_and_grad(self.params, self.pcfg, batch, mask, train=True,
                                      seed=[self.cfg.seed, DROPOUT, t])
        self.opt.step(self.params, grad * mask, mask)
        self._losses[task].append(loss)

    def score(self, t: int, masks: Sequence[np.ndarray]) -> list[TaskGradients]:
        """Unmasked and masked gradients for every task on fresh batches."""
        rng = _rng(self.cfg.seed, SCORE, t)
        batches = [self.sampler.sample(task, self.cfg.batch_size, rng) for task in self.task_ids]

        def loss_grad(i, values):
            return dt_loss_and_grad(self.params.with_values(values), self.pcfg, batches[i])

        return collect_gradients(loss_grad, self.params.values, masks)

    def record(self, t: int, phase: str, grads, alpha: int, masks, flips=None):
        value, degenerate = averaged_harmony([g.masked_grad for g in grads])
        per_task = {str(k): (float(np.mean(v)) if v else None) for k, v in self._losses.items()}
        seen = [x for v in self._losses.values() for x in v]
        flips = flips or []
        self.log.append(
            iteration=t, phase=phase, alpha=alpha, avg_harmony=value,
            harmony_degenerate=degenerate, loss_mean=float(np.mean(seen)) if seen else None,
            loss_per_task=per_task, popcount=[int(m.sum()) for m in masks],
            removed=[f.n_removed for f in flips], added=[f.n_added for f in flips],
            shortfall=[f.shortfall for f in flips], fisher_clamped=[f.clamped for f in flips])
        self._losses = {k: [] for k in self._losses}

    def track(self, masks):
        for m in masks:
            self.ever_active |= m


class _TaskMaskTrainer(_Trainer):
    def __init__(self, cfg, datasets, masks):
        super().__init__(cfg, datasets)
        self.masks = masks
        self.track(masks)

    def task_mask(self, i):
        return self.masks[i]


def _ones(n: int) -> np.ndarray:
    return np.ones(n, dtype=bool)


def _check_datasets(cfg: RunConfig, datasets: dict[int, OfflineDataset]):
    train, _ = suite_tasks(cfg)
    missing = [t.task_id for t in train if t.task_id not in datasets]
    if missing:
        raise DataError(f"missing datasets for tasks {missing} of suite {cfg.suite} "
                        f"(run gen-data first)")
    return {t.task_id: datasets[t.task_id] for t in train}


def train_mtdt(cfg: RunConfig, datasets: dict[int, OfflineDataset]) -> RunResult:
    """Unmasked multi-task baseline; scoring rounds only feed the diagnostics."""
    return _train_task_masks(cfg.replace(algo="mtdt"), datasets, masked=False)


def train_harmodt(cfg: RunConfig, datasets: dict[int, OfflineDataset]) -> RunResult:
    """Per-task masks from ERK initialisation, flipped every ``t_m`` steps."""
    return _train_task_masks(cfg.replace(algo="harmodt"), datasets, masked=True)


def _train_task_masks(cfg: RunConfig, datasets, masked: bool) -> RunResult:
    cfg.validate()
    datasets = _check_datasets(cfg, datasets)
    probe = _Trainer(cfg, datasets)
    n = len(probe.params)
    if masked:
        masks = [erk_init(probe.params.layout, cfg.S, [cfg.seed, MASK, t]).mask
                 for t in probe.task_ids]
    else:
        masks = [_ones(n) for _ in probe.task_ids]
    tr = _TaskMaskTrainer(cfg, datasets, masks)
    sched = FlipSchedule(cfg.eta_min, cfg.eta_max, cfg.E, cfg.t_m) if masked else None
    if sched is not None:
        sched.check_budget(active_count(n, cfg.S))
    for t in range(1, cfg.E + 1):
        tr.step(t)
        if t % cfg.t_m == 0:
            grads = tr.score(t, tr.masks)
            if masked:
                alpha = sched(t)
                new, flips = update_all_masks(tr.masks, tr.params.values, grads, alpha, cfg.lam,
                                              cfg.importance)
                tr.masks = new
                tr.track(new)
                tr.record(t, "train", grads, alpha, new, flips)
            else:
                tr.record(t, "train", grads, 0, tr.masks)
    owners = [f"task-{t}" for t in tr.task_ids]
    return RunResult(cfg, tr.task_ids, tr.params, tr.init_params, tr.masks if masked else None,
                     owners if masked else [], tr.log, tr.ever_active, dict(tr.sampler.targets))


class _GroupTrainer(_Trainer):
    def __init__(self, cfg, datasets):
        super().__init__(cfg, datasets)
        n = len(self.params)
        self.labels = np.zeros(len(self.task_ids), dtype=np.int64)
        self.masks = [_ones(n)]

    def task_mask(self, i):
        return self.masks[self.labels[i]]

    def per_task(self):
        return [self.masks[j] for j in self.labels]


def train_gharmodt(cfg: RunConfig, datasets: dict[int, OfflineDataset]) -> RunResult:
    """Unmasked warm-up, harmony clustering into groups, group-mask training,
    then the gating classifier on the final assignment."""
    cfg = cfg.replace(algo="gharmodt").validate()
    datasets = _check_datasets(cfg, datasets)
    if cfg.n_groups > len(datasets):
        raise ConfigurationError(f"n_groups={cfg.n_groups} exceeds the {len(datasets)} training tasks")
    tr = _GroupTrainer(cfg, datasets)
    n = len(tr.params)
    tr.track(tr.masks)
    sched = FlipSchedule(cfg.eta_min, cfg.eta_max, cfg.E, cfg.t_m)
    sched.check_budget(active_count(n, cfg.S))
    t_w = cfg.warmup
    for t in range(1, t_w + 1):
        tr.step(t)
        if t % cfg.t_m == 0:
            tr.record(t, "warmup", tr.score(t, tr.per_task()), 0, tr.masks)
    grads = tr.score(t_w, [_ones(n)] * len(tr.task_ids)) if t_w else \
        tr.score(0, [_ones(n)] * len(tr.task_ids))
    assignment, h = assign_groups(tr.task_ids, grads, cfg.n_groups, cfg.lam,
                                  seed=_seed_of(cfg.seed, CLUSTER) % (2**31))
    tr.labels = assignment.labels(tr.task_ids)
    tr.masks = init_group_masks(tr.labels, h, cfg.S)
    tr.track(tr.masks)
    for t in range(t_w + 1, cfg.E + 1):
        tr.step(t)
        if t % cfg.t_m == 0:
            grads = tr.score(t, tr.per_task())
            alpha = sched(t)
            tr.masks, flips = group_mask_update(tr.labels, tr.masks, grads, alpha, cfg.lam)
            tr.track(tr.masks)
            tr.record(t, "train", grads, alpha, tr.masks, flips)
    gating, report = train_gating(datasets, assignment, gn=cfg.gn, epochs=cfg.gating_epochs,
                                  windows_per_task=cfg.gating_windows, lr=cfg.gating_lr,
                                  seed=_seed_of(cfg.seed, GATING) % (2**31))
    return RunResult(cfg, tr.task_ids, tr.params, tr.init_params, tr.masks,
                     [f"group-{j}" for j in range(cfg.n_groups)], tr.log, tr.ever_active,
                     dict(tr.sampler.targets), assignment, gating, report)


TRAINERS = {"mtdt": train_mtdt, "harmodt": train_harmodt, "gharmodt": train_gharmodt}


def train(cfg: RunConfig, datasets: dict[int, OfflineDataset] | None = None) -> RunResult:
    cfg.validate()
    if datasets is None:
        train_tasks, _ = suite_tasks(cfg)
        datasets = load_datasets(cfg, [t.task_id for t in train_tasks])
    return TRAINERS[cfg.algo](cfg, datasets)


# ---------------------------------------------------------------------------
# Run directories


def save_run(result: RunResult, out=None) -> Path:
    out = Path(out or result.config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "status.json", json.dumps({"complete": False}) + "\n")
    _write_text(out / "config.txt", result.config.to_text())
    meta = {"task_ids": result.task_ids, "targets": {str(k): v for k, v in result.targets.items()},
            "algo": result.config.algo}
    ad.save_params(out / "params", result.params, meta)
    ad.save_params(out / "init", result.init_params)
    _write_bytes(out / "ever_active.bin", np.packbits(result.ever_active).tobytes())
    _write_text(out / "metrics.jsonl", result.log.to_jsonl())
    if result.masks is not None:
        for owner, m in zip(result.owners, result.masks):
            save_mask(out / "masks" / f"{owner}.mask", m, owner, result.config.S)
    if result.assignment is not None:
        result.assignment.save(out / "groups.json")
    if result.gating is not None:
        result.gating.save(out / "gating", result.config.gn)
        _write_text(out / "gating_report.json",
                    json.dumps(asdict(result.gating_report), sort_keys=True, indent=2) + "\n")
    _write_text(out / "status.json", json.dumps({"complete": result.complete}) + "\n")
    return out


def load_run(path) -> RunResult:
    path = Path(path)
    if not (path / "config.txt").exists():
        raise DataError(f"{path}: not a run directory (no config.txt)")
    cfg = RunConfig(**parse_config_text((path / "config.txt").read_text(), str(path / "config.txt")))
    params, meta = ad.load_params(path / "params")
    init, _ = ad.load_params(path / "init")
    n = len(params)
    ever = np.unpackbits(np.frombuffer((path / "ever_active.bin").read_bytes(), dtype=np.uint8))[:n]
    log_ = MetricsLog.from_jsonl((path / "metrics.jsonl").read_text())
    masks, owners = None, []
    if cfg.algo != "mtdt":
        owners = ([f"group-{j}" for j in range(cfg.n_groups)] if cfg.algo == "gharmodt"
                  else [f"task-{t}" for t in meta["task_ids"]])
        masks = [load_mask(path / "masks" / f"{o}.mask")[0] for o in owners]
    assignment = GroupAssignment.load(path / "groups.json") if cfg.algo == "gharmodt" else None
    gating = report = None
    if cfg.algo == "gharmodt":
        gating, _ = GatingClassifier.load(path / "gating")
        report = GatingReport(**json.loads((path / "gating_report.json").read_text()))
        report.per_group = {int(k): v for k, v in report.per_group.items()}
    status = json.loads((path / "status.json").read_text()) if (path / "status.json").exists() \
        else {"complete": False}
    return RunResult(cfg, [int(t) for t in meta["task_ids"]], params, init, masks, owners, log_,
                     ever.astype(bool), {int(k): float(v) for k, v in meta["targets"].items()},
                     assignment, gating, report, bool(status.get("complete")))


def _write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _write_text(path: Path, text: str):
    _write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class TaskScore:
    task_id: int
    episodes: int
    success_mean: float
    success_std: float
    return_mean: float
    return_std: float
    group_accuracy: float | None = None
    padded_probes: int = 0


@dataclass
class EvalReport:
    protocol: str
    algo: str
    suite: str
    seed: int
    metric: str
    tasks: list[TaskScore]
    warnings: list[str] = field(default_factory=list)

    @property
    def mean_success(self) -> float:
        return float(np.mean([t.success_mean for t in self.tasks]))

    @property
    def mean_return(self) -> float:
        return float(np.mean([t.return_mean for t in self.tasks]))

    @property
    def headline(self) -> float:
        return self.mean_success if self.metric == "success" else self.mean_return

    def to_json(self) -> str:
        doc = asdict(self)
        doc["headline"] = self.headline
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        doc.pop("headline", None)
        doc["tasks"] = [TaskScore(**t) for t in doc["tasks"]]
        return cls(**doc)


def _score(task_id, rec, n, **extra) -> TaskScore:
    return TaskScore(task_id, n, float(rec.success.mean()), float(rec.success.std()),
                     float(rec.returns.mean()), float(rec.returns.std()), **extra)


def _metric(suite: str) -> str:
    return "success" if make_suite(suite)[0].family == "point-goal" else "return"


def evaluate(result: RunResult, protocol: str, datasets: dict[int, OfflineDataset] | None = None,
             episodes: int | None = None, seed: int | None = None) -> EvalReport:
    """Score a trained run under one protocol.

    ``provided``: each task runs under its own (or its group's) mask.
    ``agnostic``: the task's demonstration prompt is given but its id is not.
    A probe with the unmasked shared policy is classified by the gating model
    and the episode runs under the predicted group's mask, conditioned on
    that group's mean target.
    ``unseen``: held-out tasks run under the vote over training masks.
    """
    cfg = result.config
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"protocol must be one of {PROTOCOLS}")
    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    train_tasks, held_tasks = suite_tasks(cfg)
    if datasets is None:
        datasets = load_datasets(cfg)
    pcfg = policy_config(cfg, datasets)
    notes: list[str] = []
    if protocol == "provided":
        tasks = train_tasks
    elif protocol == "agnostic":
        if result.gating is None or result.assignment is None:
            raise ConfigurationError("the agnostic protocol needs a grouped run with a gating model")
        tasks = train_tasks
    else:
        if not held_tasks:
            raise ConfigurationError("the unseen protocol needs held-out tasks (config key held_out)")
        tasks = held_tasks
    sampler = WindowSampler({t.task_id: datasets[t.task_id] for t in tasks}, pcfg)
    voted = None
    if protocol == "unseen" and result.masks is not None:
        if cfg.thresh >= len(result.masks):
            msg = (f"thresh={cfg.thresh} >= {len(result.masks)} masks: the voted mask is all "
                   f"zeros and the policy is degenerate")
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        voted = vote_unseen_mask(result.masks, cfg.thresh)
    scores = []
    for task in tasks:
        rng = _rng(seed, EVAL, task.task_id)
        if protocol == "agnostic":
            scores.append(_agnostic_task(result, pcfg, task, episodes, sampler, rng))
            continue
        prompts = [sampler.prompt(task.task_id, rng) for _ in range(episodes)]
        mask = voted if protocol == "unseen" else result.mask_for(task.task_id)
        target = sampler.targets[task.task_id]
        rec = rollout(task, result.params, pcfg, mask, prompts, target, task.horizon, rng,
                      n_episodes=episodes)
        scores.append(_score(task.task_id, rec, episodes))
    return EvalReport(protocol, cfg.algo, cfg.suite, seed, _metric(cfg.suite), scores, notes)


def _agnostic_task(result: RunResult, pcfg: PolicyConfig, task: TaskSpec, episodes: int,
                   sampler: WindowSampler, rng) -> TaskScore:
    cfg = result.config
    assignment = result.assignment
    targets = result.targets
    suite_target = float(np.mean([targets[t] for t in result.task_ids]))
    group_target = {j: float(np.mean([targets[t] for t in assignment.members(j)]))
                    for j in range(assignment.n_groups)}
    # a demonstration is part of the input; the id that selects a mask is not
    prompts = [sampler.prompt(task.task_id, rng) for _ in range(episodes)]
    ident = rollout_and_identify(task, result.params, pcfg, result.gating, cfg.gn, prompts,
                                 suite_target, rng, n_episodes=episodes)
    success = np.zeros(episodes, dtype=bool)
    returns = np.zeros(episodes)
    for j in np.unique(ident.groups):
        idx = np.flatnonzero(ident.groups == j)
        rec = rollout(task, result.params, pcfg, result.masks[int(j)], [prompts[i] for i in idx],
                      group_target[int(j)], task.horizon, rng, n_episodes=idx.size)
        success[idx] = rec.success
        returns[idx] = rec.returns
    # scoring only: compare with the group the task was trained in
    accuracy = float(np.mean(ident.groups == assignment.groups[task.task_id]))
    return TaskScore(task.task_id, episodes, float(success.mean()), float(success.std()),
                     float(returns.mean()), float(returns.std()), accuracy,
                     int(ident.padded.sum()))


def save_eval(report: EvalReport, run_dir) -> Path:
    path = Path(run_dir) / f"eval-{report.protocol}.json"
    _write_text(path, report.to_json())
    return path


# ---------------------------------------------------------------------------
# Export

CURVE_HEADER = ["run", "algo", "suite", "seed", "n_groups", "iteration", "phase", "alpha",
                "avg_harmony", "loss_mean", "complete"]
SCORE_HEADER = ["run", "algo", "suite", "seed", "n_groups", "protocol", "task_id", "episodes",
                "success_mean", "success_std", "return_mean", "return_std", "group_accuracy",
                "complete"]
SWEEP_HEADER = ["suite", "protocol", "n_groups", "metric", "mean", "std", "n_runs", "complete"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def find_runs(root) -> list[Path]:
    root = Path(root)
    if (root / "config.txt").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("config.txt"))


def export(results, dest=None) -> dict[str, Path]:
    """Write harmony-curve, per-task score and group-sweep CSVs plus a JSON
    summary. Runs and rows are sorted, so reruns are byte-identical."""
    results = Path(results)
    dest = Path(dest) if dest is not None else results / "export"
    curve, scores, sweep_in, summary_runs = [], [], {}, []
    for run in find_runs(results):
        if dest in run.parents:
            continue
        cfg = RunConfig(**parse_config_text((run / "config.txt").read_text()))
        status = json.loads((run / "status.json").read_text()) if (run / "status.json").exists() \
            else {"complete": False}
        name = run.relative_to(results).as_posix() if run != results else run.name
        complete = bool(status.get("complete"))
        ng = cfg.n_groups if cfg.algo == "gharmodt" else None
        base = {"run": name, "algo": cfg.algo, "suite": cfg.suite, "seed": cfg.seed,
                "n_groups": ng, "complete": complete}
        metrics = run / "metrics.jsonl"
        if metrics.exists():
            for r in MetricsLog.from_jsonl(metrics.read_text()).records:
                curve.append({**base, "iteration": r["iteration"], "phase": r["phase"],
                              "alpha": r["alpha"], "avg_harmony": r["avg_harmony"],
                              "loss_mean": r["loss_mean"]})
        evals = {}
        for p in sorted(run.glob("eval-*.json")):
            rep = EvalReport.from_json(p.read_text())
            evals[rep.protocol] = rep.headline
            for t in rep.tasks:
                scores.append({**base, "protocol": rep.protocol, "task_id": t.task_id,
                               "episodes": t.episodes, "success_mean": t.success_mean,
                               "success_std": t.success_std, "return_mean": t.return_mean,
                               "return_std": t.return_std, "group_accuracy": t.group_accuracy})
            if cfg.algo == "gharmodt":
                key = (cfg.suite, rep.protocol, cfg.n_groups)
                sweep_in.setdefault(key, {"metric": rep.metric, "values": [], "complete": True})
                sweep_in[key]["values"].append(rep.headline)
                sweep_in[key]["complete"] &= complete
        summary_runs.append({**base, "evals": evals})
    sweep = []
    for (suite, protocol, ng), v in sorted(sweep_in.items()):
        vals = np.array(v["values"])
        sweep.append({"suite": suite, "protocol": protocol, "n_groups": ng, "metric": v["metric"],
                      "mean": float(vals.mean()), "std": float(vals.std()), "n_runs": len(vals),
                      "complete": v["complete"]})
    curve.sort(key=lambda r: (r["run"], r["iteration"]))
    scores.sort(key=lambda r: (r["run"], r["protocol"], r["task_id"]))
    paths = {"harmony_curve": dest / "harmony_curve.csv", "scores": dest / "scores.csv",
             "group_sweep": dest / "group_sweep.csv", "summary": dest / "summary.json"}
    _write_text(paths["harmony_curve"], _csv(CURVE_HEADER, curve))
    _write_text(paths["scores"], _csv(SCORE_HEADER, scores))
    _write_text(paths["group_sweep"], _csv(SWEEP_HEADER, sweep))
    summary = {"complete": all(r["complete"] for r in summary_runs), "runs": summary_runs}
    _write_text(paths["summary"], json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return paths
