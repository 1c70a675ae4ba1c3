"""Run configuration: nested dataclasses loaded from YAML.

Defaults follow the published hyperparameter tables where they exist.
Validation errors carry the file line of the offending key.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .envs import LAYOUTS

AGENTS = ("irpo", "vanilla", "is-irpo", "reward-sum", "hrl",
          "blend-abrupt", "blend-exponential", "blend-linear")


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    name: str = "fourrooms"
    map: str | None = None  # path to an ASCII map; overrides the named layout
    horizon: int | None = None
    gamma: float | None = None


@dataclass
class ActorConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    init_scale: float = 0.01


@dataclass
class CriticConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    lr: float = 1e-3
    epochs: int = 10
    lam: float = 0.95  # YAML key: lambda
    optimizer: str = "adam"


@dataclass
class IrpoConfig:
    K: int | None = None  # None: per-environment default
    N: int = 5
    eta: float = 1e-2
    delta_kl: float = 1e-3
    tau_floor: float = 0.05
    tau_anneal: float = 0.1  # fraction of the budget over which tau decays
    explore_episodes: int = 8
    final_episodes: int = 16
    base_update: str = "trust_region"  # or "gradient"
    base_lr: float = 0.1
    normalize_extrinsic: bool = True
    discounted_performance: bool = True
    cg_iters: int = 10
    cg_damping: float = 1e-2
    max_backtracks: int = 10
    kl_slack: float = 1.2


@dataclass
class BaselineConfig:
    delta_kl: float = 1e-2
    episodes: int = 16
    bonus_scale: float = 1.0
    pretrain_samples: int = 50_000
    option_horizon: int = 10
    option_patience: int = 3
    blend_steps: int = 20  # ramp length (iterations) of the exponential/linear blends
    blend_episodes: int = 16


@dataclass
class IntrinsicConfig:
    kind: str = "laplacian"
    seed: int = 0


@dataclass
class BudgetConfig:
    samples: int = 2_000_000


@dataclass
class EvalConfig:
    episodes: int = 10
    interval: int = 0  # samples between evaluations; 0 evaluates every iteration


@dataclass
class RunConfig:
    agent: str = "irpo"
    seed: int = 0
    output: str | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    actor: ActorConfig = field(default_factory=ActorConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    irpo: IrpoConfig = field(default_factory=IrpoConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["critic"]["lambda"] = d["critic"].pop("lam")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self) -> None:
        problems = []
        if self.agent not in AGENTS:
            problems.append(f"agent must be one of {AGENTS}, got {self.agent!r}")
        if self.env.map is None and self.env.name.lower() not in LAYOUTS:
            problems.append(f"env.name must be one of {sorted(LAYOUTS)} or env.map must be set, "
                            f"got {self.env.name!r}")
        i = self.irpo
        if i.K is not None and i.K < 0:
            problems.append("irpo.K must be >= 0")
        if i.N < 1:
            problems.append("irpo.N must be >= 1")
        if i.eta < 0:
            problems.append("irpo.eta must be >= 0")
        if i.delta_kl <= 0:
            problems.append("irpo.delta_kl must be > 0")
        if not 0 < i.tau_floor <= 1:
            problems.append("irpo.tau_floor must be in (0, 1]")
        if i.base_update not in ("trust_region", "gradient"):
            problems.append("irpo.base_update must be trust_region or gradient")
        if not 0 <= self.critic.lam <= 1:
            problems.append("critic.lambda must be in [0, 1]")
        if self.critic.lr <= 0:
            problems.append("critic.lr must be > 0")
        if self.critic.optimizer not in ("adam", "sgd"):
            problems.append("critic.optimizer must be adam or sgd")
        if self.intrinsic.kind not in ("laplacian", "random"):
            problems.append("intrinsic.kind must be laplacian or random")
        if self.budget.samples < 0:
            problems.append("budget.samples must be >= 0")
        if self.eval.episodes < 1:
            problems.append("eval.episodes must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_RENAMES = {("critic", "lambda"): "lam"}


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], where) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _loc(source: str, node) -> str:
    return f"{source}:{node.start_mark.line + 1}"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Build a RunConfig from YAML text; unknown keys and bad values are errors."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: malformed YAML ({getattr(exc, 'problem', exc)})") from None
    cfg = RunConfig()
    if root is None:
        return cfg
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{_loc(source, root)}: top level must be a mapping")
    top_types = _field_types(RunConfig)
    for knode, vnode in root.value:
        key = knode.value
        if key not in top_types:
            raise ConfigError(f"{_loc(source, knode)}: unknown key {key!r}")
        tp = top_types[key]
        if dataclasses.is_dataclass(tp):
            if not isinstance(vnode, yaml.MappingNode):
                raise ConfigError(f"{_loc(source, vnode)}: section {key!r} must be a mapping")
            section = getattr(cfg, key)
            sub_types = _field_types(tp)
            for sk, sv in vnode.value:
                name = _RENAMES.get((key, sk.value), sk.value)
                if name not in sub_types:
                    raise ConfigError(f"{_loc(source, sk)}: unknown key {key}.{sk.value}")
                value = yaml.safe_load(yaml.serialize(sv))
                setattr(section, name, _coerce(value, sub_types[name], f"{_loc(source, sv)}: {key}.{sk.value}"))
        else:
            value = yaml.safe_load(yaml.serialize(vnode))
            setattr(cfg, key, _coerce(value, tp, f"{_loc(source, vnode)}: {key}"))
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.split(".")
        target = cfg
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise ConfigError(f"override {item!r}: unknown section {p!r}")
            target = getattr(target, p)
        name = _RENAMES.get((parts[0], parts[-1]), parts[-1]) if len(parts) == 2 else parts[-1]
        types = _field_types(type(target))
        if name not in types:
            raise ConfigError(f"override {item!r}: unknown key")
        setattr(target, name, _coerce(value, types[name], f"override {key}"))
    cfg.validate()
    return cfg
