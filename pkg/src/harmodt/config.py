"""Run configuration: a flat record of hyper-parameters with a key-value file
format, command-line overrides and an environment override for the seed."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .exceptions import ConfigurationError
from .harmony import IMPORTANCE_KINDS
from .taskenv import QUALITIES, SUITES

ALGOS = ("mtdt", "harmodt", "gharmodt")
SEED_ENV = "HARMO_SEED"


@dataclass
class RunConfig:
    """Every knob of a run. Desk-scale defaults; see ``paper_scale``."""

    algo: str = "harmodt"
    suite: str = "pointgoal8"
    quality: str = "sub-optimal"
    n_traj: int = 100
    data_seed: int = 0
    held_out: str = ""
    data_dir: str = "data"
    out: str = "runs/run"
    seed: int = 0
    # policy shape
    embed_dim: int = 32
    n_layer: int = 2
    n_head: int = 2
    dropout: float = 0.1
    activation: str = "relu"
    K: int = 20
    K_star: int = 5
    # optimisation
    E: int = 3000
    lr: float = 1e-3
    batch_size: int = 16
    # masks
    S: float = 0.2
    lam: float = 10.0
    importance: str = "fisher"
    t_m: int = 75
    eta_min: int = 0
    eta_max: int = 100
    thresh: int = 25
    # grouping and gating
    t_w: int = -1
    n_groups: int = 4
    gn: int = 5
    gating_epochs: int = 40
    gating_windows: int = 400
    gating_lr: float = 3e-4
    # evaluation
    eval_episodes: int = 50

    @classmethod
    def paper_scale(cls, **overrides) -> "RunConfig":
        """Full-size hyper-parameters from the original experiments."""
        base = dict(embed_dim=256, n_layer=6, n_head=8, E=1_000_000, lr=3e-4, batch_size=256,
                    t_m=5000, t_w=100_000, n_groups=5, thresh=25, gating_lr=3e-4)
        base.update(overrides)
        return cls(**base)

    @property
    def warmup(self) -> int:
        """Warm-up steps; a negative ``t_w`` means 10% of ``E``."""
        return self.E // 10 if self.t_w < 0 else self.t_w

    @property
    def held_out_ids(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.held_out.split(",") if x.strip())

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigurationError(msg)

        need(self.algo in ALGOS, f"algo must be one of {ALGOS}")
        need(self.suite in SUITES, f"suite must be one of {sorted(SUITES)}")
        need(self.quality in QUALITIES, f"quality must be one of {QUALITIES}")
        need(self.importance in IMPORTANCE_KINDS, f"importance must be one of {IMPORTANCE_KINDS}")
        need(self.n_traj >= 1, "n_traj must be >= 1")
        need(self.E >= 1 and self.t_m >= 1, "E and t_m must be >= 1")
        need(self.lr > 0, "lr must be positive")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.K >= 1 and self.K_star >= 1, "K and K_star must be >= 1")
        need(0.0 <= self.S < 1.0, "S must lie in [0, 1)")
        need(self.lam >= 0, "lam must be non-negative")
        need(0 <= self.eta_min <= self.eta_max, "need 0 <= eta_min <= eta_max")
        need(self.thresh >= 0, "thresh must be non-negative")
        need(0 <= self.warmup < self.E, "warm-up must be shorter than E")
        need(self.n_groups >= 1, "n_groups must be >= 1")
        need(self.gn >= 1, "gn must be >= 1")
        need(0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)")
        need(self.embed_dim % self.n_head == 0, "embed_dim must be divisible by n_head")
        need(self.eval_episodes >= 1, "eval_episodes must be >= 1")
        try:
            self.held_out_ids
        except ValueError:
            raise ConfigurationError(f"held_out must be comma-separated task ids, got {self.held_out!r}")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # text form -------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = {"str": str, "int": int, "float": float}
        return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}

    @classmethod
    def coerce(cls, key: str, value: Any):
        types = cls.field_types()
        if key not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(value, str) and types[key] is not str:
            value = value.strip()
        try:
            if types[key] is int:
                f = float(value)
                if f != int(f):
                    raise ValueError
                return int(f)
            return types[key](value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"{key}: cannot read {value!r} as {types[key].__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        try:
            out[key] = RunConfig.coerce(key, value.strip())
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path=None, overrides: dict | None = None, env=None, paper_scale: bool = False) -> RunConfig:
    """Defaults, then the file, then explicit overrides, then ``HARMO_SEED``."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = RunConfig.coerce(k, v)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        values["seed"] = RunConfig.coerce("seed", env[SEED_ENV])
    cfg = RunConfig.paper_scale(**values) if paper_scale else RunConfig(**values)
    return cfg.validate()
