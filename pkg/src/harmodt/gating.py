"""Group-identification classifier over short windows of transitions.

A window is ``gn`` consecutive (state, action, reward) transitions flattened
in order. The classifier is a three-layer ReLU MLP trained with softmax
cross-entropy; features are standardised with training-set statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .autodiff import LayoutBuilder, MaskedAdam, ParamVector, Tape
from .exceptions import ConfigurationError, DataError
from .grouping import GroupAssignment
from .policy import PolicyConfig, rollout
from .taskenv import OfflineDataset, TaskSpec

DEFAULT_GN = 5
HIDDEN = 128


def gating_input_dim(gn: int, state_dim: int, action_dim: int) -> int:
    return gn * (state_dim + action_dim + 1)


def build_gating_input(states, actions, rewards, gn: int) -> np.ndarray:
    """Concatenate ``s1, a1, r1, ..., s_gn, a_gn, r_gn`` into one vector."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    if not (len(states) == len(actions) == len(rewards) == gn):
        raise DataError(f"need exactly gn={gn} transitions, got "
                        f"{len(states)}/{len(actions)}/{len(rewards)}")
    out = np.concatenate([states.reshape(gn, -1), actions.reshape(gn, -1), rewards], axis=1).ravel()
    if not np.all(np.isfinite(out)):
        raise DataError("gating input has non-finite entries")
    return out


def _pad(arr: np.ndarray, n: int) -> np.ndarray:
    if len(arr) >= n:
        return arr[:n]
    pad = np.zeros((n - len(arr),) + arr.shape[1:], dtype=np.float64)
    return np.concatenate([np.asarray(arr, dtype=np.float64), pad])


def sample_windows(ds: OfflineDataset, gn: int, n: int, rng, trajectories=None) -> np.ndarray:
    """``n`` windows drawn uniformly over (trajectory, start); trajectories
    shorter than ``gn`` are zero-padded at the end."""
    pool = np.arange(ds.n_traj) if trajectories is None else np.asarray(trajectories)
    if pool.size == 0:
        raise DataError(f"task {ds.task_id}: no trajectories to sample windows from")
    out = np.empty((n, gating_input_dim(gn, ds.state_dim, ds.action_dim)))
    for k in range(n):
        i = int(pool[rng.integers(pool.size)])
        length = ds.lengths[i]
        start = int(rng.integers(max(1, length - gn + 1)))
        sl = slice(start, start + gn)
        out[k] = build_gating_input(_pad(ds.states[i][sl], gn), _pad(ds.actions[i][sl], gn),
                                    _pad(ds.rewards[i][sl], gn), gn)
    return out


def gating_layout(in_dim: int, n_out: int, hidden: int = HIDDEN):
    b = LayoutBuilder()
    b.linear("l1.w", in_dim, hidden)
    b.bias("l1.b", hidden)
    b.linear("l2.w", hidden, hidden)
    b.bias("l2.b", hidden)
    b.linear("l3.w", hidden, n_out)
    b.bias("l3.b", n_out)
    return b.build()


def init_gating(layout, seed) -> ParamVector:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = ParamVector(layout)
    for seg in layout:
        if seg.kind == "linear-weight":
            bound = np.sqrt(6.0 / seg.fan_in)
            p.values[seg.slice] = rng.uniform(-bound, bound, seg.size)
    return p


def gating_logits(tape: Tape, x: np.ndarray):
    h = ad.relu(ad.linear(tape.constant(x), tape.param("l1.w"), tape.param("l1.b")))
    h = ad.relu(ad.linear(h, tape.param("l2.w"), tape.param("l2.b")))
    return ad.linear(h, tape.param("l3.w"), tape.param("l3.b"))


def gating_loss_and_grad(params: ParamVector, x, labels) -> tuple[float, np.ndarray]:
    tape = Tape.for_params(params)
    loss = ad.cross_entropy(gating_logits(tape, np.asarray(x, dtype=np.float64)), labels)
    return float(loss.value), tape.backward(loss)


def gating_loss(params: ParamVector, x, labels) -> float:
    tape = Tape.for_params(params)
    return float(ad.cross_entropy(gating_logits(tape, np.asarray(x, dtype=np.float64)), labels).value)


class GatingClassifier(ClassifierMixin, BaseEstimator):
    """Three-layer ReLU MLP trained by minibatch Adam on cross-entropy.

    Classes must be the integers ``0..n_classes-1``; ``n_classes`` defaults to
    one more than the largest label seen in ``fit``.
    """

    def __init__(self, hidden: int = HIDDEN, lr: float = 3e-4, epochs: int = 50,
                 batch_size: int = 256, n_classes: int | None = None, seed: int = 0):
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if np.any(y < 0):
            raise ConfigurationError("class labels must be non-negative integers")
        n_out = int(y.max()) + 1 if self.n_classes is None else int(self.n_classes)
        if y.max() >= n_out:
            raise ConfigurationError(f"label {int(y.max())} >= n_classes {n_out}")
        self.classes_ = np.arange(n_out)
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        Z = (X - self.mean_) / self.scale_
        rng = np.random.default_rng(self.seed)
        self.params_ = init_gating(gating_layout(X.shape[1], n_out, self.hidden), rng.integers(2**63))
        opt = MaskedAdam(len(self.params_), lr=self.lr)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(Z))
            total = 0.0
            for start in range(0, len(Z), self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grad = gating_loss_and_grad(self.params_, Z[idx], y[idx])
                opt.step(self.params_, grad)
                total += loss * len(idx)
            self.loss_curve_.append(total / len(Z))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        tape = Tape.for_params(self.params_)
        return gating_logits(tape, (X - self.mean_) / self.scale_).value

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest group id
        return np.argmax(self.decision_function(X), axis=1)

    # checkpoints -----------------------------------------------------------

    def save(self, stem, gn: int) -> None:
        check_is_fitted(self, "params_")
        meta = {"kind": "gating", "n_groups": len(self.classes_), "gn": gn, "hidden": self.hidden,
                "n_features": self.n_features_in_, "mean": self.mean_.tolist(),
                "scale": self.scale_.tolist(), "lr": self.lr, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed}
        ad.save_params(stem, self.params_, meta)

    @classmethod
    def load(cls, stem) -> tuple["GatingClassifier", int]:
        params, meta = ad.load_params(stem)
        if meta.get("kind") != "gating":
            raise DataError(f"{stem}: not a gating checkpoint")
        model = cls(hidden=meta["hidden"], lr=meta["lr"], epochs=meta["epochs"],
                    batch_size=meta["batch_size"], n_classes=meta["n_groups"], seed=meta["seed"])
        model.params_ = params
        model.classes_ = np.arange(meta["n_groups"])
        model.n_features_in_ = meta["n_features"]
        model.mean_ = np.array(meta["mean"], dtype=np.float64)
        model.scale_ = np.array(meta["scale"], dtype=np.float64)
        return model, int(meta["gn"])


@dataclass
class GatingReport:
    n_groups: int
    train_accuracy: float
    heldout_accuracy: float
    per_group: dict[int, float] = field(default_factory=dict)


def gating_data(datasets: dict[int, OfflineDataset], assignment: GroupAssignment, gn: int,
                windows_per_task: int, seed, heldout_fraction: float = 0.2):
    """Windows and labels split by trajectory into train and held-out parts."""
    rng = np.random.default_rng(seed)
    parts = {"train": ([], []), "heldout": ([], [])}
    for t in assignment.task_ids:
        if t not in datasets:
            raise ConfigurationError(f"group assignment names task {t} but no dataset is loaded")
        ds = datasets[t]
        order = rng.permutation(ds.n_traj)
        n_held = max(1, int(round(heldout_fraction * ds.n_traj))) if ds.n_traj > 1 else 0
        splits = {"heldout": order[:n_held], "train": order[n_held:]}
        n = {"train": windows_per_task, "heldout": max(1, int(round(windows_per_task * heldout_fraction)))}
        for name, trajs in splits.items():
            if trajs.size == 0:
                continue
            xs, ys = parts[name]
            xs.append(sample_windows(ds, gn, n[name], rng, trajs))
            ys.append(np.full(n[name], assignment.groups[t], dtype=np.int64))
    out = {}
    for name, (xs, ys) in parts.items():
        out[name] = (np.concatenate(xs), np.concatenate(ys)) if xs else (None, None)
    return out


def train_gating(datasets: dict[int, OfflineDataset], assignment: GroupAssignment, *,
                 gn: int = DEFAULT_GN, epochs: int = 50, windows_per_task: int = 400,
                 lr: float = 3e-4, batch_size: int = 256, seed: int = 0
                 ) -> tuple[GatingClassifier, GatingReport]:
    data = gating_data(datasets, assignment, gn, windows_per_task, seed)
    X, y = data["train"]
    model = GatingClassifier(lr=lr, epochs=epochs, batch_size=batch_size,
                             n_classes=assignment.n_groups, seed=seed).fit(X, y)
    train_acc = float(np.mean(model.predict(X) == y))
    Xh, yh = data["heldout"]
    if Xh is None:
        Xh, yh = X, y
    pred = model.predict(Xh)
    per_group = {j: float(np.mean(pred[yh == j] == j)) for j in range(assignment.n_groups)
                 if np.any(yh == j)}
    report = GatingReport(assignment.n_groups, train_acc, float(np.mean(pred == yh)), per_group)
    return model, report


@dataclass
class Identification:
    groups: np.ndarray
    windows: np.ndarray
    padded: np.ndarray
    retried: np.ndarray
    probe: list = field(default_factory=list)


def rollout_and_identify(task: TaskSpec, params: ParamVector, cfg: PolicyConfig,
                         model: GatingClassifier, gn: int, prompt, target: float,
                         rng, n_episodes: int = 1) -> Identification:
    """Probe ``gn`` steps with the unmasked shared policy and classify them.

    ``prompt`` is one window shared by all episodes or a list with one per episode.

    Episodes that end before ``gn`` steps are restarted once; if the retry is
    short too, its window is zero-padded and flagged. ``task`` only drives the
    environment; nothing about it is passed to the classifier.
    """
    if gn < 1:
        raise ConfigurationError("gn must be >= 1")
    rec = rollout(task, params, cfg, None, prompt, target, gn, rng, n_episodes=n_episodes)
    states, actions, rewards = list(rec.states), list(rec.actions), list(rec.rewards)
    short = np.array([len(r) < gn for r in rewards])
    retried = short.copy()
    if short.any():
        idx = np.flatnonzero(short)
        retry_prompt = [prompt[i] for i in idx] if isinstance(prompt, (list, tuple)) else prompt
        again = rollout(task, params, cfg, None, retry_prompt, target, gn, rng, n_episodes=idx.size)
        for k, i in enumerate(idx):
            states[i], actions[i], rewards[i] = again.states[k], again.actions[k], again.rewards[k]
    padded = np.array([len(r) < gn for r in rewards])
    windows = np.array([build_gating_input(_pad(s, gn), _pad(a, gn), _pad(r, gn), gn)
                        for s, a, r in zip(states, actions, rewards)])
    groups = model.predict(windows)
    probe = list(zip(states, actions, rewards))
    return Identification(groups, windows, padded, retried, probe)
