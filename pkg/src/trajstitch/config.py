"""Run configuration: one YAML document mapped onto nested dataclasses.

Parsing is strict. Unknown keys, wrong types and missing blocks raise
``ConfigError`` naming the offending key path (e.g. ``models.forward.lr``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .models import ForwardConfig, InverseConfig, RewardConfig, ValueConfig
from .policy import BCConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass
class EnvBlock:
    name: str = "pointmass"
    params: Dict[str, float] = field(default_factory=dict)


@dataclass
class DataBlock:
    x_percent: List[float] = field(default_factory=lambda: [10.0])
    n_traj: int = 100
    noise_std: float = 1.0


@dataclass
class ModelsBlock:
    forward: ForwardConfig = field(default_factory=ForwardConfig)
    inverse: InverseConfig = field(default_factory=InverseConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    value: ValueConfig = field(default_factory=ValueConfig)


@dataclass
class StitchBlock:
    epsilon: float = 0.1
    p_tilde: float = 0.1
    K: int = 5
    max_len: Optional[int] = None
    max_changes: Optional[int] = None
    z_mode: str = "prior_mean"
    candidate_cap: int = 512
    margin_rule: str = "sign_aware"


@dataclass
class EvalBlock:
    n_eval: int = 10
    seed: int = 100
    kl_rollouts: int = 10
    # x_percent values that also get the Gaussian-BC KL estimate, the
    # value-weighted BC ablation and the per-iteration BC curve
    diagnostics_x: List[float] = field(default_factory=list)


@dataclass
class SeedsBlock:
    ts: List[int] = field(default_factory=lambda: [0])
    bc: List[int] = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    data: DataBlock = field(default_factory=DataBlock)
    models: ModelsBlock = field(default_factory=ModelsBlock)
    stitch: StitchBlock = field(default_factory=StitchBlock)
    bc: BCConfig = field(default_factory=BCConfig)
    eval: EvalBlock = field(default_factory=EvalBlock)
    seed: int = 0
    seeds: SeedsBlock = field(default_factory=SeedsBlock)
    out: Optional[str] = None


REQUIRED_BLOCKS = ("env", "data")
# blocks a command reads, on top of REQUIRED_BLOCKS
COMMAND_BLOCKS = {
    "gen": (),
    "train-models": ("models", "seeds"),
    "stitch": ("models", "stitch", "seeds"),
    "bc": ("models", "stitch", "bc", "eval", "seeds"),
    "eval": ("stitch", "eval", "seeds"),
    "report": (),
    "pipeline": ("models", "stitch", "bc", "eval", "seeds"),
}


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return tuple(_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return {str(k): _convert(v, args[1], f"{path}.{k}") for k, v in value.items()}
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {_type_name(tp)}")


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(sub, "unknown key")
        kwargs[key] = _convert(value, hints[key], sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def parse_config(text: str, command: Optional[str] = None) -> RunConfig:
    """Parse and validate a run config; ``command`` adds the blocks it needs."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping")
    for block in REQUIRED_BLOCKS + COMMAND_BLOCKS.get(command, ()):
        if block not in raw:
            raise ConfigError(block, "missing required block")
    cfg = _build(RunConfig, raw, "")
    for i, x in enumerate(cfg.data.x_percent):
        if not 0 <= x <= 100:
            raise ConfigError(f"data.x_percent[{i}]", "must lie in [0, 100]")
    if not cfg.seeds.ts or not cfg.seeds.bc:
        raise ConfigError("seeds", "need at least one ts and one bc seed")
    if cfg.stitch.K < 1:
        raise ConfigError("stitch.K", "must be at least 1")
    return cfg


def load_config(path: str, command: Optional[str] = None) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read(), command)


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, list):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(cfg))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON form, ignoring the output directory."""
    d = config_to_dict(cfg)
    d.pop("out", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
