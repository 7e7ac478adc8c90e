"""Experiment configuration: nested dataclasses, YAML I/O and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .matexp import MODES
from .model import ENCODER_KINDS

DATA_KINDS = ("minisprites", "dsprites", "npz", "beta", "dirichlet")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the bad field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ModelConfig:
    encoder: str = "mlp"
    latent_dim: int = 10
    k: int = 1
    mode: str = "symmetric"
    beta: float = 1.0
    w_el: float = 1.0
    w_cali: float = 1.0
    mask_lambda: float = math.inf
    recon: str = "bernoulli"
    recon_sigma: float = 1.0
    heads: str = "learned"
    kl: str = "ef"
    hidden: int | None = None


@dataclass
class OptimizerConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class DataConfig:
    kind: str = "minisprites"
    path: str | None = None
    resolution: int = 32
    subsample: int | None = None
    count: int = 5000
    alpha: float = 2.0
    beta: float = 5.0


@dataclass
class ScheduleConfig:
    epochs: int = 20
    batch_size: int = 256
    checkpoint_every: int = 0
    max_steps: int | None = None


@dataclass
class EvalConfig:
    metrics: list[str] = field(default_factory=lambda: ["fvm", "mig", "sap", "dci"])
    votes: int = 800
    samples_per_vote: int = 100
    subsample: int | None = None


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output: str = "runs"
    name: str = "run"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("name")
        text = json.dumps(d, sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()

    def run_id(self) -> str:
        return f"{self.name}-{self.config_hash()[:12]}"

    def run_dir(self) -> Path:
        return Path(self.output) / self.run_id()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def replace(self, **overrides) -> "ExperimentConfig":
        return apply_overrides(self, [f"{k}={json.dumps(v) if not isinstance(v, str) else v}"
                                      for k, v in overrides.items()])


_SECTIONS = {
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "eval": EvalConfig,
}


def _coerce(path: str, value, annotation: str):
    """Coerce a parsed YAML scalar to the field's declared type."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "may not be null")
    base = annotation.replace(" | None", "")
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms like 1e-3 as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(path, f"expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base == "list[str]":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(path, f"expected a list of strings, got {value!r}")
        return list(value)
    raise ConfigError(path, f"unsupported field type {annotation}")


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", f"unknown key (allowed: {sorted(fields)})")
    kwargs = {}
    for name, value in data.items():
        path = f"{prefix}{name}"
        if name in _SECTIONS and cls is ExperimentConfig:
            kwargs[name] = _build(_SECTIONS[name], value, f"{path}.")
        else:
            kwargs[name] = _coerce(path, value, fields[name].type)
    return cls(**kwargs)


def _check_choice(path, value, choices):
    if value not in choices:
        raise ConfigError(path, f"must be one of {list(choices)}, got {value!r}")


def _check_positive(path, value, allow_zero=False):
    if value is None:
        return
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(path, f"must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    m, o, d, s, e = cfg.model, cfg.optimizer, cfg.data, cfg.schedule, cfg.eval
    _check_choice("model.encoder", m.encoder, ENCODER_KINDS)
    _check_choice("model.mode", m.mode, MODES)
    _check_choice("model.recon", m.recon, ("bernoulli", "gaussian"))
    _check_choice("model.heads", m.heads, ("learned", "gaussian"))
    _check_choice("model.kl", m.kl, ("ef", "gaussian"))
    _check_positive("model.latent_dim", m.latent_dim)
    _check_positive("model.k", m.k, allow_zero=True)
    for name in ("beta", "w_el", "w_cali", "mask_lambda"):
        _check_positive(f"model.{name}", getattr(m, name), allow_zero=True)
    _check_positive("model.recon_sigma", m.recon_sigma)
    _check_positive("model.hidden", m.hidden)
    _check_positive("optimizer.lr", o.lr)
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(o, name) < 1:
            raise ConfigError(f"optimizer.{name}", "must lie in [0, 1)")
    _check_positive("optimizer.eps", o.eps)
    _check_positive("optimizer.weight_decay", o.weight_decay, allow_zero=True)
    _check_choice("data.kind", d.kind, DATA_KINDS)
    if d.kind in ("dsprites", "npz") and not d.path:
        raise ConfigError("data.path", f"required for data.kind={d.kind!r}")
    if d.kind == "minisprites" and d.resolution < 16:
        raise ConfigError("data.resolution", "must be >= 16")
    _check_positive("data.subsample", d.subsample)
    _check_positive("data.count", d.count)
    _check_positive("data.alpha", d.alpha)
    _check_positive("data.beta", d.beta)
    _check_positive("schedule.epochs", s.epochs, allow_zero=True)
    _check_positive("schedule.batch_size", s.batch_size)
    _check_positive("schedule.checkpoint_every", s.checkpoint_every, allow_zero=True)
    _check_positive("schedule.max_steps", s.max_steps, allow_zero=True)
    for metric in e.metrics:
        _check_choice("eval.metrics", metric, ("fvm", "mig", "sap", "dci"))
    _check_positive("eval.votes", e.votes)
    _check_positive("eval.samples_per_vote", e.samples_per_vote)
    _check_positive("eval.subsample", e.subsample)
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    return cfg


def from_dict(data: dict | None) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data or {}, ""))


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"not valid YAML: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"cannot parse value {raw!r}") from exc
    return key.strip().split("."), value


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Return a new config with dotted ``key=value`` overrides applied."""
    data = cfg.to_dict()
    for item in overrides or []:
        keys, value = parse_override(item)
        node = data
        for i, k in enumerate(keys[:-1]):
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(".".join(keys[: i + 1]), "unknown section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(".".join(keys), "unknown key")
        node[keys[-1]] = value
    return from_dict(data)
