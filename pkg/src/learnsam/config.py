"""Run configuration: YAML files, dotted overrides and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    kind: str = "gridworld"
    size: int = 12
    walls: list = field(default_factory=list)
    horizon: int | None = None
    gamma: float = 0.99
    step_size: float = 0.2
    goal_radius: float = 0.1


@dataclass
class LambdaConfig:
    metric: str = "weighted_l2"
    phi: str = "linear"
    h: float = 1.0


@dataclass
class SamConfig:
    enabled: bool = True
    K: int | None = None
    grouping: str = "softmax"
    c: float = 4.0
    b: list = field(default_factory=lambda: [-0.5, 0.5])
    drop_unhelpful: bool = True
    interval: int = 1
    psi_samples: int = 32


@dataclass
class TrustRegionSection:
    delta: float = 0.01
    cg_iters: int = 10
    damping: float = 0.01
    backtrack: float = 0.8
    max_backtracks: int = 10
    gae_lambda: float = 0.95
    normalize_advantages: bool = True
    value_iters: int = 50


@dataclass
class PolicySection:
    hidden: list = field(default_factory=lambda: [32, 32])
    value_hidden: list = field(default_factory=lambda: [32, 32])
    smoothing: float = 0.1
    pretrain_iters: int = 100


@dataclass
class DemoConfig:
    noise_sd: float = 0.3
    n_pairs: int = 500
    m: int = 1
    analytic_expert: bool = True
    expert_path: str | None = None
    expert_epochs: int = 60


@dataclass
class BudgetConfig:
    total_steps: int = 40960
    steps_per_epoch: int | None = None
    eval_episodes: int = 10


@dataclass
class SweepConfig:
    axis: str = "quality"
    values: list = field(default_factory=lambda: [0.0, 0.3, 0.6, 1.0])
    methods: list = field(default_factory=lambda: ["learn_sam", "trpo"])
    seeds: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "learn_sam"
    env: EnvConfig = field(default_factory=EnvConfig)
    lam: LambdaConfig = field(default_factory=LambdaConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    trpo: TrustRegionSection = field(default_factory=TrustRegionSection)
    policy: PolicySection = field(default_factory=PolicySection)
    demo: DemoConfig = field(default_factory=DemoConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def steps_per_epoch(self) -> int:
        if self.budget.steps_per_epoch:
            return int(self.budget.steps_per_epoch)
        return 2048 if self.env.kind == "gridworld" else 4096

    @property
    def n_epochs(self) -> int:
        return max(1, self.budget.total_steps // self.steps_per_epoch)

    def validate(self) -> "RunConfig":
        from .learner import METHODS
        from .mdp import make_env
        from .optim import TrustRegionConfig
        from .sam import GroupingConfig

        try:
            make_env(**env_params(self.env))
            g = GroupingConfig(self.sam.grouping, self.sam.c, tuple(self.sam.b))
            if self.sam.K is not None and self.sam.K != g.K:
                raise ValueError(f"sam.K={self.sam.K} but b defines {g.K} categories")
            TrustRegionConfig(self.trpo.delta, self.trpo.cg_iters, self.trpo.damping, self.trpo.backtrack,
                              self.trpo.max_backtracks)
            if self.trpo.damping <= 0:
                raise ValueError("damping must be positive")
            if self.lam.metric not in ("weighted_l2", "manhattan", "zero_one"):
                raise ValueError(f"unknown lambda metric {self.lam.metric!r}")
            if self.lam.phi not in ("linear", "square") or self.lam.h <= 0:
                raise ValueError("lambda bijection must be linear or square with h > 0")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.budget.total_steps <= 0 or self.steps_per_epoch <= 0 or self.budget.eval_episodes <= 0:
            raise ConfigError("budget must be positive")
        if self.demo.n_pairs < 1 or self.demo.m < 0 or self.demo.noise_sd < 0:
            raise ConfigError("demo needs n_pairs >= 1, m >= 0 and noise_sd >= 0")
        if self.sweep.axis not in ("quality", "sparsity"):
            raise ConfigError("sweep axis must be quality or sparsity")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


# yaml key -> attribute name where they differ
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def env_params(env: EnvConfig) -> dict:
    if env.kind == "gridworld":
        return {"kind": "gridworld", "size": env.size, "walls": [tuple(w) for w in env.walls],
                "horizon": env.horizon, "gamma": env.gamma}
    if env.kind == "pointmass":
        out = {"kind": "pointmass", "step_size": env.step_size, "goal_radius": env.goal_radius, "gamma": env.gamma}
        if env.horizon:
            out["horizon"] = env.horizon
        return out
    raise ValueError(f"unknown environment kind {env.kind!r}")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {_REVERSE.get(f.name, f.name): _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _apply(obj, data: dict, where: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        attr = _ALIASES.get(key, key)
        if attr not in names:
            raise ConfigError(f"unknown config key {where + key!r}")
        current = getattr(obj, attr)
        if dataclasses.is_dataclass(current):
            _apply(current, value, f"{where}{key}.")
        else:
            setattr(obj, attr, _coerce(current, value, where + key))


def _coerce(current, value, key):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and isinstance(value, (int, float)) and not isinstance(value, bool):
        if float(value) != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return list(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key} has the wrong type: {value!r}")


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key}: {exc}") from exc
    return key.strip(), value


def _nest(key: str, value) -> dict:
    out: dict = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Defaults, then the YAML file, then ``key=value`` overrides, then ``seed``."""
    cfg = RunConfig()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _apply(cfg, data)
    for item in overrides:
        key, value = parse_override(item)
        _apply(cfg, _nest(key, value))
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, data)
    return cfg.validate()
