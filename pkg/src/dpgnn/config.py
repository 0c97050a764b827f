"""Run configuration: defaults, flat YAML config files and command-line overrides.

Precedence, lowest to highest: built-in defaults, the ``--config`` file, flags
given on the command line. The config file is a flat YAML mapping whose keys
are the flag names with dashes replaced by underscores, e.g.::

    dataset: data
    name: MUTAG
    hidden: 32
    lr: 0.01
    first_tf: identical
    lambda2: 1
    lambda5: 1
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .losses import LossWeights
from .model import TRANSFORMS
from .training import HyperGrid, TrainConfig, config_digest


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        self.field = field_name
        self.message = message
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data"
    name: str = "MUTAG"
    out: str = "runs"
    workers: int = 1
    precision: int = 32
    seed: int = 0
    folds: int = 10
    hidden: int = 32
    lr: float = 0.01
    epochs: int = 300
    batch: int = 32
    layers: int = 5
    first_tf: str = "identical"
    lambda2: float = 0.0
    lambda3: float = 0.0
    lambda4: float = 0.0
    lambda5: float = 0.0
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 50
    grid_hidden: tuple = (16, 32, 64)
    grid_lr: tuple = (0.01, 0.001)
    grid_first_tf: tuple = ("identical", "mlp")
    grid_lambdas: tuple = field(default_factory=lambda: HyperGrid().lambdas)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch, initial_lr=self.lr,
            lr_decay_factor=self.lr_decay_factor, lr_decay_period=self.lr_decay_period,
            seed=self.seed,
            weights=LossWeights(self.lambda2, self.lambda3, self.lambda4, self.lambda5),
            hidden_dim=self.hidden, num_layers=self.layers, first_layer_transform=self.first_tf,
            precision=self.precision)

    def grid(self) -> HyperGrid:
        return HyperGrid(tuple(self.grid_hidden), tuple(self.grid_lr),
                         tuple(self.grid_first_tf), tuple(tuple(l) for l in self.grid_lambdas))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("grid_hidden", "grid_lr", "grid_first_tf"):
            d[k] = list(d[k])
        d["grid_lambdas"] = [list(l) for l in d["grid_lambdas"]]
        return d

    def experiment_dict(self) -> dict:
        """Fields that affect results (excludes output location and parallelism)."""
        d = self.to_dict()
        for k in ("out", "workers"):
            d.pop(k)
        return d

    def digest(self, *keys_to_drop) -> str:
        d = self.experiment_dict()
        for k in keys_to_drop:
            d.pop(k, None)
        return config_digest(d)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_INT = {"workers", "precision", "seed", "folds", "hidden", "epochs", "batch", "layers",
        "lr_decay_period"}
_FLOAT = {"lr", "lambda2", "lambda3", "lambda4", "lambda5", "lr_decay_factor"}
_STR = {"dataset", "name", "out", "first_tf"}


def _coerce(key, value):
    try:
        if key in _INT:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if key in _FLOAT:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if key in _STR:
            return str(value)
        if key == "grid_hidden":
            return tuple(int(v) for v in value)
        if key == "grid_lr":
            return tuple(float(v) for v in value)
        if key == "grid_first_tf":
            return tuple(str(v) for v in value)
        if key == "grid_lambdas":
            lams = tuple(tuple(float(x) for x in lam) for lam in value)
            if any(len(l) != 4 for l in lams):
                raise ValueError
            return lams
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}") from None
    raise ConfigError(key, "unknown field")


def validate(cfg: RunConfig) -> RunConfig:
    checks = [
        ("workers", cfg.workers >= 1, "must be >= 1"),
        ("precision", cfg.precision in (32, 64), "must be 32 or 64"),
        ("folds", cfg.folds >= 2, "must be >= 2"),
        ("hidden", cfg.hidden >= 1, "must be >= 1"),
        ("lr", cfg.lr > 0, "must be > 0"),
        ("epochs", cfg.epochs >= 1, "must be >= 1"),
        ("batch", cfg.batch >= 2, "must be >= 2 (batch norm needs two rows)"),
        ("layers", cfg.layers >= 1, "must be >= 1"),
        ("first_tf", cfg.first_tf in TRANSFORMS, f"must be one of {list(TRANSFORMS)}"),
        ("lr_decay_period", cfg.lr_decay_period >= 1, "must be >= 1"),
        ("grid_first_tf", all(t in TRANSFORMS for t in cfg.grid_first_tf),
         f"entries must be in {list(TRANSFORMS)}"),
    ]
    for k in ("lambda2", "lambda3", "lambda4", "lambda5"):
        checks.append((k, getattr(cfg, k) >= 0, "must be >= 0"))
    for name, ok, msg in checks:
        if not ok:
            raise ConfigError(name, msg)
    return cfg


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"unparseable config file: {exc}".replace("\n", " ")) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config", "config file must be a flat key-value mapping")
    return data


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in FIELDS:
                raise ConfigError(key, "unknown field")
            values[key] = _coerce(key, value)
    return validate(RunConfig(**values))
