"""Layered run configuration: defaults < file < environment < command line.

The file is plain ``key = value`` lines (``#`` comments allowed). Any key can
be overridden by an environment variable ``RSK_<KEY>`` (upper case).
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .loss import LossConfig
from .sampler import SamplerConfig
from .train import TrainConfig

ENV_PREFIX = "RSK_"
CUTOFFS_PLAIN = (1, 2, 4, 8, 16)
CUTOFFS_SIMIX = (1, 2, 4, 8, 12, 16, 20, 24, 28, 32)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"
    eval_dataset: str = ""
    num_classes: int = 32
    samples_per_class: int = 30
    holdout_per_class: int = 10
    input_dim: int = 16
    noise: float = 0.1
    data_seed: int = 0
    # sampler (M, m)
    batch_size: int = 64
    per_class: int = 4
    # loss
    tau1: float = 1.0
    tau2: float = 0.01
    cutoffs: tuple[int, ...] = ()
    simix: bool = False
    objective: str = "rsk"
    margin: float = 0.5
    # model
    embed_dim: int = 8
    hidden: tuple[int, ...] = ()
    bias: bool = False
    forward_precision: str = "float64"
    # optimisation
    iterations: int = 300
    lr: float = 0.01
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    chunk_size: int = 64
    threads: int = 1
    seed: int = 0
    # reporting
    eval_every: int = 100
    eval_ks: tuple[int, ...] = (1, 2, 4, 8)

    @property
    def effective_cutoffs(self) -> tuple[int, ...]:
        if self.cutoffs:
            return self.cutoffs
        return CUTOFFS_SIMIX if self.simix else CUTOFFS_PLAIN

    def validate(self) -> RunConfig:
        positive = ["num_classes", "samples_per_class", "input_dim", "batch_size", "per_class",
                    "embed_dim", "iterations", "chunk_size", "threads"]
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        for key in ("tau1", "tau2", "lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")
        if self.per_class < 2:
            raise ConfigError("per_class", "must be >= 2 so every query has a positive")
        if self.batch_size % self.per_class:
            raise ConfigError("batch_size", f"{self.batch_size} is not a multiple of per_class={self.per_class}")
        if self.holdout_per_class < 0 or self.holdout_per_class >= self.samples_per_class:
            raise ConfigError("holdout_per_class", "must be in [0, samples_per_class)")
        if self.forward_precision not in ("float32", "float64"):
            raise ConfigError("forward_precision", "must be float32 or float64")
        if self.objective not in ("rsk", "contrastive"):
            raise ConfigError("objective", "must be rsk or contrastive")
        try:
            LossConfig(self.tau1, self.tau2, self.effective_cutoffs)
        except ValueError as exc:
            raise ConfigError("cutoffs", str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            sampler=SamplerConfig(self.batch_size, self.per_class, self.seed),
            loss=LossConfig(self.tau1, self.tau2, self.effective_cutoffs),
            simix=self.simix,
            chunk_size=self.chunk_size,
            iterations=self.iterations,
            seed=self.seed,
            forward_dtype=self.forward_precision,
            lr=self.lr,
            milestones=self.milestones,
            decay=self.decay,
            threads=self.threads,
            objective=self.objective,
            margin=self.margin,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw) -> object:
    if key not in _FIELDS:
        raise ConfigError(key, "unknown key")
    kind = _FIELDS[key].type
    if not isinstance(raw, str):
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw)
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            text = text.strip("[](){}")
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"{path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[run]\n" + path.read_text())
    except configparser.Error as exc:
        raise ConfigError("--config", str(exc)) from None
    return dict(parser["run"])


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    values: dict[str, object] = {}
    if path:
        values.update(read_config_file(path))
    environ = os.environ if environ is None else environ
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELDS:
                values[key] = raw
    values.update(overrides or {})
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    return cfg.validate()


def config_from_dict(values: dict) -> RunConfig:
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def parse_assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(text, "override must look like key=value")
    return key.strip(), value
