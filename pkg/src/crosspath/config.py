"""Experiment configuration: INI-style sections of key/value pairs.

Example::

    [experiment]
    name = synth-adaptive
    out_dir = runs
    seed = 0

    [model]
    paths = 2
    mode = adaptive

    [train]
    epochs = 20
    batch_size = 32
    lr = 0.02
    decay_epochs = 12, 17

    [data]
    source = synthetic
    size = 12
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, SyntheticContextSpec, generate_synthetic, load_cifar10, load_synthetic, split
from .models import ModelSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | cifar10 | file
    cifar_dir: str = ""
    file: str = ""
    contexts: int = 2
    classes: int = 4
    per_cell: int = 125
    size: int = 12
    noise: float = 0.35
    color_jitter: float = 0.1
    seed: int = 0
    train_fraction: float = 0.8
    subset: int = 0  # cifar10: keep this many train images (0 = all)

    def synthetic_spec(self) -> SyntheticContextSpec:
        return SyntheticContextSpec(self.contexts, self.classes, self.per_cell, self.size, self.noise,
                                    self.color_jitter, self.seed)


@dataclass
class ModelConfig:
    paths: int = 2
    mode: str = "adaptive"
    classes: int = 0  # 0 = take from the dataset


@dataclass
class ExperimentConfig:
    name: str = "run"
    out_dir: str = "runs"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed, mode=self.model.mode)

    def model_spec(self, classes: int, input_shape) -> ModelSpec:
        return ModelSpec(paths=self.model.paths, classes=self.model.classes or classes,
                         input_shape=tuple(input_shape), mode=self.model.mode, seed=self.seed)

    # --- serialization ---

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"name": self.name, "out_dir": self.out_dir, "seed": str(self.seed)}
        for section, obj in (("model", self.model), ("train", self.train), ("data", self.data)):
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                           if not (section == "train" and f.name in ("seed", "mode"))}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        for key, value in (overrides or {}).items():
            if "." not in key:
                raise ConfigError(f"override {key!r} must look like section.key")
            sec, k = key.split(".", 1)
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp[sec][k] = value
        known = {"experiment", "model", "train", "data"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
        extra = set(exp) - {"name", "out_dir", "seed"}
        if extra:
            raise ConfigError(f"unknown key(s) in [experiment]: {sorted(extra)}")
        try:
            train_kw = _section(cp, "train", TrainConfig, skip=("seed", "mode"))
            model = ModelConfig(**_section(cp, "model", ModelConfig))
            cfg = cls(
                name=exp.get("name", "run"),
                out_dir=exp.get("out_dir", "runs"),
                seed=int(exp.get("seed", 0)),
                model=model,
                train=TrainConfig(**train_kw, mode=model.mode),
                data=DataConfig(**_section(cp, "data", DataConfig)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(), overrides)

    def validate(self) -> None:
        if self.model.paths < 1:
            raise ConfigError("model.paths must be >= 1")
        if self.data.source not in ("synthetic", "cifar10", "file"):
            raise ConfigError(f"data.source must be synthetic, cifar10 or file, got {self.data.source!r}")
        if self.data.source == "cifar10" and not self.data.cifar_dir:
            raise ConfigError("data.cifar_dir is required for source = cifar10")
        if self.data.source == "file" and not self.data.file:
            raise ConfigError("data.file is required for source = file")
        if not 0 < self.data.train_fraction < 1:
            raise ConfigError("data.train_fraction must be in (0, 1)")
        if not self.name or "/" in self.name:
            raise ConfigError(f"invalid run name {self.name!r}")


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and validation datasets with train-split normalization stats."""
    d = cfg.data
    if d.source == "synthetic":
        return split(generate_synthetic(d.synthetic_spec()), d.train_fraction, seed=d.seed)
    if d.source == "file":
        return split(load_synthetic(d.file), d.train_fraction, seed=d.seed)
    train, test = load_cifar10(d.cifar_dir)
    if d.subset:
        train, _ = split(train, d.subset / len(train), seed=d.seed)
        test = test.with_stats(train.mean, train.std)
    return train, test


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _section(cp: configparser.ConfigParser, name: str, cls, skip: tuple[str, ...] = ()) -> dict:
    if not cp.has_section(name):
        return {}
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    out = {}
    for key, raw in cp[name].items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        out[key] = _parse(raw, fields[key].default, f"{name}.{key}")
    return out


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r}") from exc
    return raw
