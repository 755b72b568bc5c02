"""Synthetic multi-task suites, scripted behaviour policies and offline datasets.

Two task families share a 2-D action space (norm-clamped to ``max_action``):

* ``point-goal``: the internal state is ``(pos, goal)``; the agent moves by the
  clamped action and is rewarded ``-|pos' - goal|``. The episode ends once the
  distance drops below ``success_threshold``. Goals are resampled every episode
  inside the task's annulus sector and, unless ``observe_goal`` is set, the
  goal half of the observation is zeroed (the task must be inferred).
* ``direction``: the internal state is ``(pos, velocity)``; velocity is the
  clamped action and the reward is its projection on the task direction.

Dataset files are a JSON manifest plus one raw little-endian float32 array per
field, under ``<root>/<suite>/<task_id>/``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, DataError

FAMILIES = ("point-goal", "direction")
QUALITIES = ("near-optimal", "sub-optimal")
_QUALITY_CODE = {"near-optimal": 0, "sub-optimal": 1}
EXPERT_GAIN = 0.5


@dataclass(frozen=True)
class TaskSpec:
    family: str
    task_id: int
    # point-goal: centre of the goal sector; direction: unit direction
    target: tuple[float, float]
    # point-goal only: (r_min, r_max, half_angle) of the goal sector
    region: tuple[float, float, float] = (0.95, 1.05, 0.05)
    state_dim: int = 4
    action_dim: int = 2
    horizon: int = 32
    success_threshold: float = 0.1
    max_action: float = 1.0
    observe_goal: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown task family {self.family!r}")
        if self.state_dim != 4 or self.action_dim != 2:
            raise ConfigurationError("tasks use 4-D states and 2-D actions")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.family == "direction":
            if abs(math.hypot(*self.target) - 1.0) > 1e-12:
                raise ConfigurationError("direction must be unit-norm")
        else:
            r0, r1, half = self.region
            if not (0 <= r0 < r1 and half > 0):
                raise ConfigurationError("goal region is degenerate")

    @property
    def angle(self) -> float:
        return math.atan2(self.target[1], self.target[0])


def _unit(angle):
    return (math.cos(angle), math.sin(angle))


def point_goal_suite(n_tasks: int = 8, **kwargs) -> list[TaskSpec]:
    """Goal regions are ``n_tasks`` equal-angle sectors of an annulus."""
    tasks = []
    for i in range(n_tasks):
        ang = 2 * math.pi * i / n_tasks
        r0, r1, _ = kwargs.get("region", (0.95, 1.05, 0.05))
        centre = 0.5 * (r0 + r1)
        c, s = _unit(ang)
        tasks.append(TaskSpec("point-goal", i, (centre * c, centre * s), **kwargs))
    return check_suite(tasks)


def direction_suite(n_tasks: int = 8, **kwargs) -> list[TaskSpec]:
    return check_suite([TaskSpec("direction", i, _unit(2 * math.pi * i / n_tasks), **kwargs)
                        for i in range(n_tasks)])


SUITES = {"pointgoal8": point_goal_suite, "dir8": direction_suite}
# held-out task ids for the unseen-task protocol
HELD_OUT = {"dir8": (1, 5), "pointgoal8": (1, 5)}


def make_suite(name: str) -> list[TaskSpec]:
    try:
        return SUITES[name]()
    except KeyError:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {sorted(SUITES)}") from None


def split_suite(name: str) -> tuple[list[TaskSpec], list[TaskSpec]]:
    """(training tasks, held-out tasks) for the unseen-task protocol."""
    tasks = make_suite(name)
    held = set(HELD_OUT[name])
    return [t for t in tasks if t.task_id not in held], [t for t in tasks if t.task_id in held]


def check_suite(tasks: Sequence[TaskSpec]) -> list[TaskSpec]:
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("a suite needs at least one task")
    if len({t.action_dim for t in tasks}) != 1:
        raise ConfigurationError("all tasks in a suite must share the action space")
    if len({t.state_dim for t in tasks}) != 1:
        raise ConfigurationError("all tasks in a suite must share the state space")
    if len({t.task_id for t in tasks}) != len(tasks):
        raise ConfigurationError("task ids must be unique")
    return tasks


# ---------------------------------------------------------------------------
# Dynamics


def clamp_action(action, max_action: float = 1.0) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    factor = np.where(norm > max_action, max_action / np.maximum(norm, 1e-300), 1.0)
    a = a * factor
    return np.nan_to_num(a, nan=0.0, posinf=0.0, neginf=0.0)


def reset(task: TaskSpec, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Sample initial internal states; shape (4,) or (n, 4)."""
    shape = () if n is None else (n,)
    state = np.zeros(shape + (4,))
    if task.family == "point-goal":
        state[..., :2] = rng.uniform(-0.1, 0.1, size=shape + (2,))
        r0, r1, half = task.region
        radius = rng.uniform(r0, r1, size=shape)
        ang = task.angle + rng.uniform(-half, half, size=shape)
        state[..., 2] = radius * np.cos(ang)
        state[..., 3] = radius * np.sin(ang)
    return state


def step(task: TaskSpec, state, action):
    """Deterministic transition; works on single states or batches.

    Returns ``(next_state, reward, done)``. For point-goal tasks ``done`` marks
    success; direction tasks only end at the horizon.
    """
    state = np.asarray(state, dtype=np.float64)
    a = clamp_action(action, task.max_action)
    nxt = state.copy()
    nxt[..., :2] = state[..., :2] + a
    if task.family == "point-goal":
        dist = np.linalg.norm(nxt[..., :2] - state[..., 2:], axis=-1)
        return nxt, -dist, dist < task.success_threshold
    nxt[..., 2:] = a
    reward = a @ np.asarray(task.target)
    return nxt, reward, np.zeros(np.shape(reward), dtype=bool)


def observe(task: TaskSpec, state) -> np.ndarray:
    obs = np.array(state, dtype=np.float64)
    if task.family == "point-goal" and not task.observe_goal:
        obs[..., 2:] = 0.0
    return obs


def distance_to_goal(task: TaskSpec, state) -> np.ndarray:
    state = np.asarray(state)
    return np.linalg.norm(state[..., :2] - state[..., 2:], axis=-1)


def expert_action(task: TaskSpec, state) -> np.ndarray:
    """Scripted expert: proportional controller (point-goal) or full speed (direction)."""
    state = np.asarray(state, dtype=np.float64)
    if task.family == "point-goal":
        return EXPERT_GAIN * (state[..., 2:] - state[..., :2])
    return np.broadcast_to(np.asarray(task.target) * task.max_action, state[..., :2].shape).copy()


AIM_SPREAD = 1.5
JITTER = 0.05


def _disk(rng, shape=()):
    ang = rng.uniform(0, 2 * math.pi, size=shape)
    rad = np.sqrt(rng.uniform(size=shape))
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)


def behaviour_policy(task: TaskSpec, noise: float, rng):
    """Scripted behaviour for one trajectory at noise level ``noise`` in [0, 1].

    The policy commits to a mis-aimed target for the whole trajectory: a goal
    displaced by up to ``AIM_SPREAD * noise`` (point-goal) or a heading rotated
    by up to ``pi * noise`` (direction), plus small per-step jitter. Noise 0
    is the expert; noise 1 aims essentially at random.
    """
    if task.family == "point-goal":
        offset = AIM_SPREAD * noise * _disk(rng)

        def act(state, g):
            state = np.asarray(state, dtype=np.float64)
            aim = state[..., 2:] + offset
            return EXPERT_GAIN * (aim - state[..., :2]) + JITTER * noise * g.normal(size=2)
    else:
        ang = task.angle + math.pi * noise * rng.uniform(-1.0, 1.0)
        heading = task.max_action * np.array(_unit(ang))

        def act(state, g):
            return heading + JITTER * noise * g.normal(size=2)
    return act


# ---------------------------------------------------------------------------
# Offline datasets


@dataclass
class OfflineDataset:
    task_id: int
    states: list[np.ndarray]
    actions: list[np.ndarray]
    rewards: list[np.ndarray]
    quality: str
    seed: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.states:
            raise DataError(f"task {self.task_id}: dataset has no trajectories")
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise DataError(f"task {self.task_id}: per-field trajectory counts differ")
        for i, (s, a, r) in enumerate(zip(self.states, self.actions, self.rewards)):
            if len(s) == 0:
                raise DataError(f"task {self.task_id}: trajectory {i} is empty")
            if not (len(s) == len(a) == len(r)):
                raise DataError(f"task {self.task_id}: trajectory {i} field lengths differ")
            if not np.all(np.isfinite(r)):
                raise DataError(f"task {self.task_id}: trajectory {i} has non-finite rewards")

    @property
    def n_traj(self) -> int:
        return len(self.states)

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.states]

    @property
    def state_dim(self) -> int:
        return self.states[0].shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions[0].shape[1]

    def returns(self) -> np.ndarray:
        return np.array([self.returns_to_go(i)[0] for i in range(self.n_traj)])

    def returns_to_go(self, i: int) -> np.ndarray:
        """Undiscounted suffix sums: ``rtg[t] = rewards[t] + rtg[t + 1]``."""
        r = self.rewards[i].astype(np.float64)
        rtg = np.empty_like(r)
        acc = 0.0
        for t in range(len(r) - 1, -1, -1):
            acc = r[t] + acc
            rtg[t] = acc
        return rtg

    def success_flags(self) -> np.ndarray:
        return np.array(self.info.get("success", [False] * self.n_traj), dtype=bool)

    def equals(self, other: "OfflineDataset") -> bool:
        if (self.task_id, self.quality, self.seed, self.n_traj) != (
                other.task_id, other.quality, other.seed, other.n_traj):
            return False
        return all(np.array_equal(x, y) for fa, fb in (
            (self.states, other.states), (self.actions, other.actions),
            (self.rewards, other.rewards)) for x, y in zip(fa, fb))


def noise_schedule(quality: str, n_traj: int) -> np.ndarray:
    """Per-trajectory behaviour noise, annealed from fully random to expert.

    The sub-optimal schedule covers only the first (random-heavy) half of the
    near-optimal sweep, stretched over ``n_traj`` trajectories.
    """
    if quality not in QUALITIES:
        raise ConfigurationError(f"unknown quality {quality!r}")
    if n_traj < 1:
        raise ConfigurationError("n_traj must be >= 1")
    frac = np.linspace(0.0, 1.0, n_traj) if n_traj > 1 else np.ones(1)
    if quality == "sub-optimal":
        frac = 0.5 * frac
    return 1.0 - frac


def run_episode(task: TaskSpec, policy, rng, state=None):
    """Roll out ``policy(obs, rng) -> action`` for one episode.

    Returns float64 arrays (observations, actions, rewards) and a success flag.
    """
    state = reset(task, rng) if state is None else np.asarray(state, dtype=np.float64)
    obs, acts, rews = [], [], []
    success = False
    for _ in range(task.horizon):
        o = observe(task, state)
        a = clamp_action(policy(state, rng), task.max_action)
        state, r, done = step(task, state, a)
        obs.append(o)
        acts.append(a)
        rews.append(float(r))
        if done:
            success = True
            break
    return np.array(obs), np.array(acts), np.array(rews), success


def generate_dataset(task: TaskSpec, quality: str, n_traj: int, seed: int) -> OfflineDataset:
    """Deterministic offline dataset for one task (pure function of its inputs)."""
    noise = noise_schedule(quality, n_traj)
    rng = np.random.default_rng([seed, task.task_id, _QUALITY_CODE[quality]])
    states, actions, rewards, success = [], [], [], []
    for sigma in noise:
        o, a, r, ok = run_episode(task, behaviour_policy(task, sigma, rng), rng)
        states.append(o.astype(np.float32))
        actions.append(a.astype(np.float32))
        rewards.append(r.astype(np.float32))
        success.append(bool(ok))
    ds = OfflineDataset(task.task_id, states, actions, rewards, quality, seed,
                        info={"success": success, "family": task.family})
    ds.info["mean_return"] = float(ds.returns().mean())
    return ds


def generate_suite(tasks: Sequence[TaskSpec], quality: str, n_traj: int, seed: int):
    return {t.task_id: generate_dataset(t, quality, n_traj, seed) for t in tasks}


# ---------------------------------------------------------------------------
# File format

_FIELDS = ("states", "actions", "rewards")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(root, suite: str, ds: OfflineDataset) -> Path:
    """Write one task's dataset under ``<root>/<suite>/<task_id>/``."""
    folder = Path(root) / suite / str(ds.task_id)
    folder.mkdir(parents=True, exist_ok=True)
    payloads = {
        "states": np.concatenate(ds.states).astype("<f4").tobytes(),
        "actions": np.concatenate(ds.actions).astype("<f4").tobytes(),
        "rewards": np.concatenate(ds.rewards).astype("<f4").tobytes(),
    }
    manifest = {
        "format": "harmodt-dataset-v1",
        "suite": suite,
        "task_id": ds.task_id,
        "quality": ds.quality,
        "seed": ds.seed,
        "n_traj": ds.n_traj,
        "lengths": ds.lengths,
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "checksums": {k: _sha256(v) for k, v in payloads.items()},
        "info": ds.info,
    }
    for name, data in payloads.items():
        _write_atomic(folder / f"{name}.f32", data)
    _write_atomic(folder / "manifest.json",
                  (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return folder


def load_dataset(folder) -> OfflineDataset:
    folder = Path(folder)
    mpath = folder / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
        lengths = [int(n) for n in manifest["lengths"]]
        sd, ad = int(manifest["state_dim"]), int(manifest["action_dim"])
        checksums = manifest["checksums"]
        task_id, quality, seed = int(manifest["task_id"]), manifest["quality"], manifest["seed"]
        n_traj = int(manifest["n_traj"])
    except FileNotFoundError:
        raise DataError(f"{mpath}: manifest missing") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{mpath}: malformed manifest ({exc})") from None
    if manifest.get("format") != "harmodt-dataset-v1":
        raise DataError(f"{mpath}: unknown format {manifest.get('format')!r}")
    if n_traj != len(lengths) or n_traj < 1:
        raise DataError(f"{mpath}: n_traj={n_traj} but {len(lengths)} lengths listed")
    if any(n < 1 for n in lengths):
        raise DataError(f"{mpath}: empty trajectory listed")
    total = sum(lengths)
    widths = {"states": sd, "actions": ad, "rewards": 1}
    arrays = {}
    for name in _FIELDS:
        path = folder / f"{name}.f32"
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise DataError(f"{path}: array file missing") from None
        expected = 4 * total * widths[name]
        if len(data) != expected:
            raise DataError(f"{path}: expected {expected} bytes, found {len(data)} "
                            f"(mismatch at byte offset {min(len(data), expected)})")
        if _sha256(data) != checksums.get(name):
            raise DataError(f"{path}: checksum mismatch")
        arr = np.frombuffer(data, dtype="<f4").astype(np.float32)
        arrays[name] = arr.reshape(total, widths[name]) if name != "rewards" else arr
    bounds = np.cumsum(lengths)[:-1]
    return OfflineDataset(
        task_id, list(np.split(arrays["states"], bounds)),
        list(np.split(arrays["actions"], bounds)), list(np.split(arrays["rewards"], bounds)),
        quality, seed, info=manifest.get("info", {}))


def save_suite(root, suite: str, datasets: dict[int, OfflineDataset]) -> Path:
    for ds in datasets.values():
        save_dataset(root, suite, ds)
    return Path(root) / suite


def load_suite(root, suite: str, task_ids: Sequence[int] | None = None) -> dict[int, OfflineDataset]:
    base = Path(root) / suite
    if task_ids is None:
        if not base.is_dir():
            raise DataError(f"{base}: no dataset directory")
        task_ids = sorted(int(p.name) for p in base.iterdir() if p.name.isdigit())
    missing = [t for t in task_ids if not (base / str(t) / "manifest.json").exists()]
    if missing:
        raise DataError(f"{base}: missing datasets for tasks {missing}")
    return {t: load_dataset(base / str(t)) for t in task_ids}
