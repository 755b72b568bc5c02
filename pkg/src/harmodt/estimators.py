"""Estimator-style wrappers around the training loops.

``fit`` takes a mapping from task id to offline dataset. Hyper-parameters not
exposed as constructor arguments come from ``config``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import harness
from .config import RunConfig
from .exceptions import ConfigurationError
from .policy import TrajectoryBatch, predict_actions


class _SequencePolicyEstimator(BaseEstimator):
    _algo = ""
    _own = ()

    def _config(self) -> RunConfig:
        base = self.config if self.config is not None else RunConfig()
        changes = {k: getattr(self, k) for k in self._own}
        return base.replace(algo=self._algo, **changes).validate()

    def fit(self, datasets: dict, y=None):
        if not isinstance(datasets, dict) or not datasets:
            raise ConfigurationError("fit expects a non-empty {task_id: OfflineDataset} mapping")
        self.result_ = harness.TRAINERS[self._algo](self._config(), datasets)
        self.task_ids_ = list(self.result_.task_ids)
        return self

    def predict(self, batch: TrajectoryBatch, task_id: int) -> np.ndarray:
        """Actions for a batch of windows of a known task."""
        check_is_fitted(self, "result_")
        r = self.result_
        pcfg = harness.policy_config(r.config, {0: _Shape(batch)})
        return predict_actions(r.params, pcfg, batch, r.mask_for(task_id))

    def evaluate(self, protocol: str = "provided", datasets=None, episodes=None, seed=None):
        check_is_fitted(self, "result_")
        return harness.evaluate(self.result_, protocol, datasets, episodes, seed)

    def score(self, datasets=None, y=None) -> float:
        """Headline task-provided metric (success rate or mean return)."""
        return self.evaluate("provided", datasets).headline

    def save(self, out=None):
        check_is_fitted(self, "result_")
        return harness.save_run(self.result_, out)


class _Shape:
    """Just enough of a dataset to size the policy from a batch."""

    def __init__(self, batch: TrajectoryBatch):
        self.state_dim = batch.states.shape[-1]
        self.action_dim = batch.actions.shape[-1]


class MTDT(_SequencePolicyEstimator):
    """Unmasked multi-task sequence policy (the baseline)."""

    _algo = "mtdt"
    _own = ("E", "lr", "batch_size", "seed")

    def __init__(self, config: RunConfig | None = None, E: int = 3000, lr: float = 1e-3,
                 batch_size: int = 16, seed: int = 0):
        self.config = config
        self.E = E
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed


class HarmoDT(_SequencePolicyEstimator):
    """Shared policy with one sparse mask per task, updated by harmony scores."""

    _algo = "harmodt"
    _own = ("E", "lr", "batch_size", "seed", "S", "lam", "t_m", "eta_min", "eta_max", "importance")

    def __init__(self, config: RunConfig | None = None, E: int = 3000, lr: float = 1e-3,
                 batch_size: int = 16, seed: int = 0, S: float = 0.2, lam: float = 10.0,
                 t_m: int = 75, eta_min: int = 0, eta_max: int = 100, importance: str = "fisher"):
        self.config = config
        self.E = E
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.S = S
        self.lam = lam
        self.t_m = t_m
        self.eta_min = eta_min
        self.eta_max = eta_max
        self.importance = importance

    @property
    def masks_(self):
        check_is_fitted(self, "result_")
        return self.result_.masks


class GHarmoDT(_SequencePolicyEstimator):
    """Shared policy with one mask per task group and a gating classifier."""

    _algo = "gharmodt"
    _own = ("E", "lr", "batch_size", "seed", "S", "lam", "t_m", "eta_min", "eta_max", "n_groups",
            "t_w", "gn")

    def __init__(self, config: RunConfig | None = None, E: int = 3000, lr: float = 1e-3,
                 batch_size: int = 16, seed: int = 0, S: float = 0.2, lam: float = 10.0,
                 t_m: int = 75, eta_min: int = 0, eta_max: int = 100, n_groups: int = 4,
                 t_w: int = -1, gn: int = 5):
        self.config = config
        self.E = E
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.S = S
        self.lam = lam
        self.t_m = t_m
        self.eta_min = eta_min
        self.eta_max = eta_max
        self.n_groups = n_groups
        self.t_w = t_w
        self.gn = gn

    @property
    def assignment_(self):
        check_is_fitted(self, "result_")
        return self.result_.assignment
