"""YAML experiment configuration with strict keys and documented defaults."""
import dataclasses
import inspect
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .clustering import SCHEMES, clusterable_layers, target_widths
from .model import FACTORIES, NetworkSpec, SpecError, derive_constraint_groups, with_widths
from .optim import DEFAULT_CENTRIPETAL, DEFAULT_LR, DEFAULT_WEIGHT_DECAY, CsgdConfig, step_schedule


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    factory: str = "resnet"
    options: dict = field(default_factory=dict)  # factory keyword arguments
    widths: dict = field(default_factory=dict)  # per-layer width overrides


@dataclass
class DatasetConfig:
    kind: str = "mnist"  # mnist | blobs | rings
    path: Optional[str] = None
    n_train: int = 10000
    n_test: Optional[int] = None
    classes: int = 2
    shape: list = field(default_factory=lambda: [8, 8, 1])
    separation: float = 4.0
    noise: float = 1.0


@dataclass
class ClusteringConfig:
    scheme: str = "kmeans"
    ratio: float = 0.625
    layers: str = "all"  # all | internal
    targets: dict = field(default_factory=dict)


@dataclass
class OptimizerConfig:
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    centripetal: float = DEFAULT_CENTRIPETAL
    batch_size: int = 64
    schedule: Optional[list] = None  # [[epoch, lr], ...]; None -> x0.1 at 1/2 and 3/4


@dataclass
class TrainConfig:
    epochs: int = 10
    prune_epochs: int = 10
    early_trim: bool = True
    trim_threshold: float = 1e-5
    check_every: int = 50
    snap_tolerance: float = 1e-3
    equivalence_tolerance: float = 1e-4


@dataclass
class ExperimentOptions:
    scale: float = 2.0
    eps_list: list = field(default_factory=lambda: [1e-3, 2e-3, 1e-2])
    sweep_steps: int = 2000
    lasso_strength: Optional[float] = None
    lasso_fraction: float = 0.1
    slim_ratio: float = 0.625
    clip_ratio: float = 0.375


@dataclass
class ExperimentConfig:
    network: NetworkConfig
    dataset: DatasetConfig
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentOptions = field(default_factory=ExperimentOptions)
    seed: int = 0
    out: str = "runs/default"

    def spec(self) -> NetworkSpec:
        factory = FACTORIES[self.network.factory]
        spec = factory(**self.network.options)
        if self.network.widths:
            spec = with_widths(spec, {k: int(v) for k, v in self.network.widths.items()})
        return spec

    def csgd(self, epochs: int) -> CsgdConfig:
        o = self.optimizer
        schedule = o.schedule if o.schedule is not None else step_schedule(o.lr, epochs)
        return CsgdConfig(o.lr, o.weight_decay, o.centripetal, [tuple(p) for p in schedule])

    def targets(self, spec: Optional[NetworkSpec] = None, ratio: Optional[float] = None,
                layers: Optional[str] = None) -> dict:
        spec = spec or self.spec()
        groups = derive_constraint_groups(spec)
        candidates = clusterable_layers(spec, groups)
        if (layers or self.clustering.layers) == "internal":
            candidates = [lid for lid in candidates if spec.layer(lid).role == "internal"]
        overrides = {k: v for k, v in self.clustering.targets.items() if k in candidates}
        return target_widths(spec, ratio if ratio is not None else self.clustering.ratio,
                             candidates, overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# strict parsing


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        # YAML 1.1 reads 3e-3 as a string
        try:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp in (dict, list):
        if not isinstance(value, tp):
            raise ConfigError(f"{path}: expected a {'mapping' if tp is dict else 'list'}, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {path + '.' if path else ''}{key}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required key {sub}")
    return cls(**kwargs)


def _number(v, path: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {v!r}") from None


def _validate(cfg: ExperimentConfig) -> None:
    net = cfg.network
    if net.factory not in FACTORIES:
        raise ConfigError(f"network.factory: unknown {net.factory!r}, choose from {sorted(FACTORIES)}")
    accepted = inspect.signature(FACTORIES[net.factory]).parameters
    for key in net.options:
        if key not in accepted:
            raise ConfigError(f"unknown key network.options.{key}")
    if cfg.dataset.kind not in ("mnist", "blobs", "rings"):
        raise ConfigError(f"dataset.kind: unknown {cfg.dataset.kind!r}")
    if cfg.clustering.scheme not in SCHEMES:
        raise ConfigError(f"clustering.scheme: unknown {cfg.clustering.scheme!r}")
    if cfg.clustering.layers not in ("all", "internal"):
        raise ConfigError(f"clustering.layers: expected all or internal")
    if not 0 < cfg.clustering.ratio <= 1:
        raise ConfigError(f"clustering.ratio must lie in (0, 1], got {cfg.clustering.ratio}")
    cfg.experiment.eps_list = [_number(v, f"experiment.eps_list[{i}]")
                               for i, v in enumerate(cfg.experiment.eps_list)]
    if cfg.optimizer.schedule is not None:
        sched = []
        for i, pair in enumerate(cfg.optimizer.schedule):
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigError(f"optimizer.schedule[{i}]: expected [epoch, lr]")
            sched.append([int(pair[0]), _number(pair[1], f"optimizer.schedule[{i}][1]")])
        cfg.optimizer.schedule = sched
    try:
        cfg.csgd(cfg.train.prune_epochs)
        spec = cfg.spec()
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    for lid, r in cfg.clustering.targets.items():
        path = f"clustering.targets.{lid}"
        if lid not in {l.id for l in spec.layers} or spec.layer(lid).kind != "conv":
            raise ConfigError(f"{path}: no conv layer named {lid!r}")
        if not isinstance(r, int) or r < 1:
            raise ConfigError(f"{path}: expected a positive integer, got {r!r}")
        if r > spec.layer(lid).filters:
            raise ConfigError(f"{path}: target {r} exceeds the layer width {spec.layer(lid).filters}")


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from None
    return config_from_dict(data or {})
