"""Prompt-conditioned decision-transformer policy built on the flat-vector tape.

Input layout per sample: ``K*`` prompt triplets followed by ``K`` history
triplets, each triplet tokenised as (return-to-go, state, action). The action
for history step ``m`` is read from the output at that step's state token.
History windows are left-padded; padded tokens are never attended to and are
excluded from the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LayoutBuilder, ParamVector, Tape
from .exceptions import ConfigurationError, DataError, RunError
from .taskenv import OfflineDataset, TaskSpec, clamp_action, observe, reset, step


@dataclass(frozen=True)
class PolicyConfig:
    state_dim: int = 4
    action_dim: int = 2
    embed_dim: int = 64
    n_layer: int = 2
    n_head: int = 2
    context: int = 20
    prompt_len: int = 5
    mlp_ratio: int = 4
    dropout: float = 0.1
    activation: str = "relu"
    rtg_scale: float = 10.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.n_head:
            raise ConfigurationError("embed_dim must be divisible by n_head")
        if self.context < 1 or self.prompt_len < 1:
            raise ConfigurationError("context and prompt_len must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def n_tokens(self) -> int:
        return 3 * (self.prompt_len + self.context)


def policy_layout(cfg: PolicyConfig):
    b = LayoutBuilder()
    D = cfg.embed_dim
    b.linear("embed_rtg.w", 1, D)
    b.bias("embed_rtg.b", D)
    b.linear("embed_state.w", cfg.state_dim, D)
    b.bias("embed_state.b", D)
    b.linear("embed_action.w", cfg.action_dim, D)
    b.bias("embed_action.b", D)
    b.embedding("pos", cfg.n_tokens, D)
    b.norm_scale("ln_in.g", D)
    b.bias("ln_in.b", D)
    H = cfg.mlp_ratio * D
    for i in range(cfg.n_layer):
        p = f"block{i}."
        b.norm_scale(p + "ln1.g", D)
        b.bias(p + "ln1.b", D)
        b.linear(p + "qkv.w", D, 3 * D)
        b.bias(p + "qkv.b", 3 * D)
        b.linear(p + "proj.w", D, D)
        b.bias(p + "proj.b", D)
        b.norm_scale(p + "ln2.g", D)
        b.bias(p + "ln2.b", D)
        b.linear(p + "fc.w", D, H)
        b.bias(p + "fc.b", H)
        b.linear(p + "out.w", H, D)
        b.bias(p + "out.b", D)
    b.norm_scale("ln_f.g", D)
    b.bias("ln_f.b", D)
    b.linear("head.w", D, cfg.action_dim)
    b.bias("head.b", cfg.action_dim)
    return b.build()


def init_params(layout, seed, std: float = 0.02) -> ParamVector:
    """Normal(0, std) weights and embeddings, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params = ParamVector(layout)
    for seg in layout:
        view = params.values[seg.slice]
        if seg.kind in ("linear-weight", "embedding"):
            view[:] = rng.normal(0.0, std, size=seg.size)
        elif seg.kind == "norm-scale":
            view[:] = 1.0
    return params


def init_policy(cfg: PolicyConfig, seed) -> ParamVector:
    return init_params(policy_layout(cfg), seed, cfg.init_std)


# ---------------------------------------------------------------------------
# Windows and batches


@dataclass
class PromptWindow:
    rtg: np.ndarray  # (K*,)
    states: np.ndarray  # (K*, state_dim)
    actions: np.ndarray  # (K*, action_dim)
    task_source: int | None = None


@dataclass
class HistoryWindow:
    rtg: np.ndarray  # (K,)
    states: np.ndarray  # (K, state_dim)
    actions: np.ndarray  # (K, action_dim)
    valid: np.ndarray  # (K,) False on left padding


@dataclass
class TrajectoryBatch:
    prompt_rtg: np.ndarray  # (B, K*)
    prompt_states: np.ndarray  # (B, K*, sd)
    prompt_actions: np.ndarray  # (B, K*, ad)
    rtg: np.ndarray  # (B, K)
    states: np.ndarray  # (B, K, sd)
    actions: np.ndarray  # (B, K, ad) actions fed as input tokens
    valid: np.ndarray  # (B, K)
    targets: np.ndarray  # (B, K, ad)
    task_ids: np.ndarray = field(default=None)

    def __len__(self):
        return self.rtg.shape[0]

    @classmethod
    def from_windows(cls, prompts: Sequence[PromptWindow], histories: Sequence[HistoryWindow],
                     targets: Sequence[np.ndarray] | None = None) -> "TrajectoryBatch":
        if len(prompts) != len(histories):
            raise DataError("prompt and history counts differ")
        if len({len(p.rtg) for p in prompts}) != 1 or len({len(h.rtg) for h in histories}) != 1:
            raise DataError("all windows in a batch must share K and K*")
        if targets is None:
            targets = [h.actions for h in histories]
        return cls(
            np.stack([p.rtg for p in prompts]), np.stack([p.states for p in prompts]),
            np.stack([p.actions for p in prompts]), np.stack([h.rtg for h in histories]),
            np.stack([h.states for h in histories]), np.stack([h.actions for h in histories]),
            np.stack([h.valid for h in histories]), np.stack(targets),
            np.array([-1 if p.task_source is None else p.task_source for p in prompts]))

    def concat(self, other: "TrajectoryBatch") -> "TrajectoryBatch":
        def ids(b):
            return np.full(len(b), -1) if b.task_ids is None else np.asarray(b.task_ids)

        parts = [np.concatenate([getattr(self, f), getattr(other, f)])
                 for f in self.__dataclass_fields__ if f != "task_ids"]
        return TrajectoryBatch(*parts, task_ids=np.concatenate([ids(self), ids(other)]))


def build_input(prompt: PromptWindow, history: HistoryWindow, prompt_len: int | None = None):
    """Raw token sequence in model order as ``(modality, value, valid)`` tuples.

    Modalities are ``"rtg"``, ``"state"`` and ``"action"``; prompt tokens come
    first and are always valid.
    """
    if prompt_len is not None and len(prompt.rtg) != prompt_len:
        raise DataError(f"prompt has {len(prompt.rtg)} steps, expected {prompt_len}")
    tokens = []
    for i in range(len(prompt.rtg)):
        tokens += [("rtg", prompt.rtg[i], True), ("state", prompt.states[i], True),
                   ("action", prompt.actions[i], True)]
    for i in range(len(history.rtg)):
        ok = bool(history.valid[i])
        tokens += [("rtg", history.rtg[i], ok), ("state", history.states[i], ok),
                   ("action", history.actions[i], ok)]
    return tokens


def _check_batch(cfg: PolicyConfig, batch: TrajectoryBatch):
    B = len(batch)
    if batch.prompt_rtg.shape != (B, cfg.prompt_len):
        raise DataError(f"prompt shape {batch.prompt_rtg.shape}, expected {(B, cfg.prompt_len)}")
    if batch.rtg.shape != (B, cfg.context):
        raise DataError(f"history shape {batch.rtg.shape}, expected {(B, cfg.context)}")
    if batch.states.shape[-1] != cfg.state_dim or batch.actions.shape[-1] != cfg.action_dim:
        raise ConfigurationError("batch state/action width does not match the policy")


# ---------------------------------------------------------------------------
# Forward pass and loss


def forward(tape: Tape, cfg: PolicyConfig, batch: TrajectoryBatch):
    """Predicted actions (B, K, action_dim) at every history position."""
    _check_batch(cfg, batch)
    B, Kp, K, D = len(batch), cfg.prompt_len, cfg.context, cfg.embed_dim
    L = Kp + K
    p = tape.param
    rtg = np.concatenate([batch.prompt_rtg, batch.rtg], axis=1)[..., None] / cfg.rtg_scale
    states = np.concatenate([batch.prompt_states, batch.states], axis=1)
    actions = np.concatenate([batch.prompt_actions, batch.actions], axis=1)
    er = ad.linear(rtg, p("embed_rtg.w"), p("embed_rtg.b"))
    es = ad.linear(states, p("embed_state.w"), p("embed_state.b"))
    ea = ad.linear(actions, p("embed_action.w"), p("embed_action.b"))
    x = ad.reshape(ad.stack([er, es, ea], axis=2), (B, 3 * L, D))
    x = ad.add(x, p("pos"))
    x = ad.layer_norm(x, p("ln_in.g"), p("ln_in.b"))
    x = ad.dropout(x, cfg.dropout)
    key_valid = np.concatenate([np.ones((B, Kp), dtype=bool), batch.valid.astype(bool)], axis=1)
    bias = ad.attention_bias(np.repeat(key_valid, 3, axis=1), 3 * L)
    act = ad.relu if cfg.activation == "relu" else ad.gelu
    for i in range(cfg.n_layer):
        pre = f"block{i}."
        h = ad.layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b"))
        qkv = ad.linear(h, p(pre + "qkv.w"), p(pre + "qkv.b"))
        q, k, v = (ad.index(qkv, (Ellipsis, slice(j * D, (j + 1) * D))) for j in range(3))
        a = ad.causal_attention(q, k, v, cfg.n_head, bias=bias)
        a = ad.linear(a, p(pre + "proj.w"), p(pre + "proj.b"))
        x = ad.add(x, ad.dropout(a, cfg.dropout))
        h = ad.layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b"))
        h = act(ad.linear(h, p(pre + "fc.w"), p(pre + "fc.b")))
        h = ad.linear(h, p(pre + "out.w"), p(pre + "out.b"))
        x = ad.add(x, ad.dropout(h, cfg.dropout))
    x = ad.layer_norm(x, p("ln_f.g"), p("ln_f.b"))
    state_tokens = ad.index(x, (slice(None), slice(3 * Kp + 1, 3 * L, 3), slice(None)))
    return ad.tanh(ad.linear(state_tokens, p("head.w"), p("head.b")))


def loss_node(tape: Tape, cfg: PolicyConfig, batch: TrajectoryBatch):
    """Squared error summed over action dimensions, averaged over the
    non-padded history positions of the whole batch."""
    if not np.any(batch.valid):
        raise DataError("every history position in the batch is padding")
    pred = forward(tape, cfg, batch)
    return ad.mse(pred, batch.targets, batch.valid.astype(np.float64))


def dt_loss(params: ParamVector, cfg: PolicyConfig, batch: TrajectoryBatch, mask=None,
            *, train: bool = False, seed=None) -> float:
    tape = Tape.for_params(params, mask, train=train, seed=seed)
    return float(loss_node(tape, cfg, batch).value)


def dt_loss_and_grad(params: ParamVector, cfg: PolicyConfig, batch: TrajectoryBatch, mask=None,
                     *, train: bool = False, seed=None) -> tuple[float, np.ndarray]:
    """Loss at ``theta * mask`` and its gradient with respect to those values."""
    tape = Tape.for_params(params, mask, train=train, seed=seed)
    loss = loss_node(tape, cfg, batch)
    return float(loss.value), tape.backward(loss)


def predict_actions(params: ParamVector, cfg: PolicyConfig, batch: TrajectoryBatch,
                    mask=None) -> np.ndarray:
    tape = Tape.for_params(params, mask)
    return forward(tape, cfg, batch).value


# ---------------------------------------------------------------------------
# Sampling windows from offline data


class WindowSampler:
    """Draws prompt/history windows from per-task offline datasets."""

    def __init__(self, datasets: dict[int, OfflineDataset], cfg: PolicyConfig):
        self.cfg = cfg
        self.datasets = datasets
        self._rtg = {t: [ds.returns_to_go(i) for i in range(ds.n_traj)]
                     for t, ds in datasets.items()}
        self._prompt_pool = {}
        for t, ds in datasets.items():
            pool = [i for i, n in enumerate(ds.lengths) if n >= cfg.prompt_len]
            if not pool:
                raise DataError(f"task {t}: no trajectory is long enough for a "
                                f"{cfg.prompt_len}-step prompt")
            self._prompt_pool[t] = pool
        self.targets = {t: float(ds.returns().max()) for t, ds in datasets.items()}

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.datasets)

    def prompt(self, task_id: int, rng) -> PromptWindow:
        ds = self.datasets[task_id]
        pool = self._prompt_pool[task_id]
        i = pool[rng.integers(len(pool))]
        n = ds.lengths[i]
        start = rng.integers(n - self.cfg.prompt_len + 1)
        sl = slice(start, start + self.cfg.prompt_len)
        return PromptWindow(self._rtg[task_id][i][sl], ds.states[i][sl].astype(np.float64),
                            ds.actions[i][sl].astype(np.float64), task_id)

    def history(self, task_id: int, traj: int, end: int) -> HistoryWindow:
        """Window of up to K steps ending at step ``end`` (inclusive)."""
        K = self.cfg.context
        ds = self.datasets[task_id]
        start = max(0, end - K + 1)
        n = end + 1 - start
        rtg = np.zeros(K)
        states = np.zeros((K, ds.state_dim))
        actions = np.zeros((K, ds.action_dim))
        valid = np.zeros(K, dtype=bool)
        rtg[K - n:] = self._rtg[task_id][traj][start:end + 1]
        states[K - n:] = ds.states[traj][start:end + 1]
        actions[K - n:] = ds.actions[traj][start:end + 1]
        valid[K - n:] = True
        return HistoryWindow(rtg, states, actions, valid)

    def sample(self, task_id: int, batch_size: int, rng) -> TrajectoryBatch:
        ds = self.datasets[task_id]
        prompts, hists = [], []
        for _ in range(batch_size):
            i = rng.integers(ds.n_traj)
            end = rng.integers(ds.lengths[i])
            hists.append(self.history(task_id, i, end))
            prompts.append(self.prompt(task_id, rng))
        return TrajectoryBatch.from_windows(prompts, hists)


# ---------------------------------------------------------------------------
# Rollout


@dataclass
class EpisodeRecord:
    states: list[np.ndarray]
    actions: list[np.ndarray]
    rewards: list[np.ndarray]
    success: np.ndarray
    returns: np.ndarray


def _tile_prompt(prompt: PromptWindow | Sequence[PromptWindow], n: int):
    prompts = [prompt] * n if isinstance(prompt, PromptWindow) else list(prompt)
    if len(prompts) != n:
        raise ConfigurationError(f"need {n} prompts, got {len(prompts)}")
    return (np.stack([p.rtg for p in prompts]), np.stack([p.states for p in prompts]),
            np.stack([p.actions for p in prompts]))


def rollout(task: TaskSpec, params: ParamVector, cfg: PolicyConfig, mask, prompt,
            target: float | np.ndarray, horizon: int, rng, n_episodes: int = 1,
            init_states=None) -> EpisodeRecord:
    """Autoregressive evaluation of ``theta * mask`` on ``n_episodes`` parallel episodes.

    At every step the action predicted at the latest state token is executed
    and the return-to-go is decremented by the observed reward.
    """
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    n = n_episodes
    effective = params.values if mask is None else params.values * mask
    p_rtg, p_states, p_actions = _tile_prompt(prompt, n)
    K = cfg.context
    state = reset(task, rng, n) if init_states is None else np.array(init_states, dtype=np.float64)
    rtg_hist = np.zeros((n, horizon))
    obs_hist = np.zeros((n, horizon, cfg.state_dim))
    act_hist = np.zeros((n, horizon, cfg.action_dim))
    rew_hist = np.zeros((n, horizon))
    alive = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=int)
    success = np.zeros(n, dtype=bool)
    rtg_now = np.broadcast_to(np.asarray(target, dtype=np.float64), (n,)).copy()
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        obs_hist[idx, t] = observe(task, state[idx])
        rtg_hist[idx, t] = rtg_now[idx]
        start = max(0, t - K + 1)
        m = t + 1 - start
        hist_rtg = np.zeros((idx.size, K))
        hist_obs = np.zeros((idx.size, K, cfg.state_dim))
        hist_act = np.zeros((idx.size, K, cfg.action_dim))
        valid = np.zeros((idx.size, K), dtype=bool)
        hist_rtg[:, K - m:] = rtg_hist[idx, start:t + 1]
        hist_obs[:, K - m:] = obs_hist[idx, start:t + 1]
        hist_act[:, K - m:] = act_hist[idx, start:t + 1]
        valid[:, K - m:] = True
        batch = TrajectoryBatch(p_rtg[idx], p_states[idx], p_actions[idx], hist_rtg, hist_obs,
                                hist_act, valid, np.zeros_like(hist_act))
        tape = Tape(effective, params.layout)
        pred = forward(tape, cfg, batch).value[:, -1]
        if not np.all(np.isfinite(pred)):
            bad = idx[~np.all(np.isfinite(pred), axis=1)]
            raise RunError(f"task {task.task_id}: non-finite action at step {t} "
                           f"for episodes {bad.tolist()}")
        action = clamp_action(pred, task.max_action)
        nxt, reward, done = step(task, state[idx], action)
        act_hist[idx, t] = action
        rew_hist[idx, t] = reward
        rtg_now[idx] -= reward
        state[idx] = nxt
        lengths[idx] = t + 1
        success[idx] |= done
        alive[idx[done]] = False
    return EpisodeRecord(
        [obs_hist[i, :lengths[i]] for i in range(n)], [act_hist[i, :lengths[i]] for i in range(n)],
        [rew_hist[i, :lengths[i]] for i in range(n)], success,
        np.array([rew_hist[i, :lengths[i]].sum() for i in range(n)]))
