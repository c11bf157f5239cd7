"""Run configuration: one YAML file plus dotted ``key=value`` overrides.

The schema is strict: unknown keys anywhere in the tree are rejected. The
run hash is computed over the fully merged tree, so command-line overrides
and ablation flags change it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import re

import yaml

from .archive import canonical_json, sha256_bytes
from .atlas import EncoderConfig
from .errors import ConfigError
from .modeling import ModelConfig
from .train import TrainConfig


@dataclass
class DataSection:
    root: str = ""
    remap: str = ""  # a single table for every dataset; empty = per-dataset remap.cfg
    manifest_dir: str = ""  # where harmonize wrote train/val/test manifests


@dataclass
class AtlasSection:
    K: int | None = None  # None = number of planes present
    encoder: str = "small"  # small | resnet34
    encoder_epochs: int = 20
    encoder_lr: float = 1e-3
    encoder_batch_size: int = 16
    n_init: int = 10
    max_iter: int = 100

    def encoder_config(self, input_size: int) -> EncoderConfig:
        if self.encoder == "resnet34":
            return EncoderConfig.resnet34(input_size)
        if self.encoder == "small":
            return EncoderConfig(input_size=input_size)
        raise ConfigError(f"unknown encoder preset {self.encoder!r}")


@dataclass
class EvalSection:
    batch_size: int = 8
    threshold: float = 0.5


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-4``) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    atlas: AtlasSection = field(default_factory=AtlasSection)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        # validate eagerly so bad values fail at load time, not mid-run
        self.model_config()
        self.train_config()
        self.atlas.encoder_config(self.model_config().input_size)
        if self.eval.threshold != 0.5:
            raise ConfigError("only the 0.5 threshold is supported")

    def model_config(self) -> ModelConfig:
        _reject_unknown(self.model, {f.name for f in fields(ModelConfig)}, "model")
        try:
            return ModelConfig(**self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def train_config(self) -> TrainConfig:
        _reject_unknown(self.train, set(_TRAIN_KEYS), "train")
        values = dict(self.train)
        values.setdefault("input_size", self.model.get("input_size", ModelConfig.input_size))
        try:
            return TrainConfig(**values, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "atlas": dataclasses.asdict(self.atlas),
            "model": self.model_config().to_dict(),
            "train": {k: v for k, v in dataclasses.asdict(self.train_config()).items() if k != "seed"},
            "eval": dataclasses.asdict(self.eval),
        }

    @property
    def hash(self) -> str:
        return sha256_bytes(canonical_json(self.to_dict()).encode())

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, tree: dict | None) -> "RunConfig":
        tree = dict(tree or {})
        _reject_unknown(tree, {f.name for f in fields(cls)}, "")
        kwargs: dict[str, Any] = {}
        if "seed" in tree:
            kwargs["seed"] = int(tree["seed"])
        for name, section in (("data", DataSection), ("atlas", AtlasSection), ("eval", EvalSection)):
            sub = tree.get(name) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"{name}: expected a mapping")
            _reject_unknown(sub, {f.name for f in fields(section)}, name)
            kwargs[name] = section(**sub)
        for name in ("model", "train"):
            sub = tree.get(name) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"{name}: expected a mapping")
            kwargs[name] = dict(sub)
        return cls(**kwargs)


def _reject_unknown(tree: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(tree) - allowed)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def apply_override(tree: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = _yaml_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            tree = _yaml_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        apply_override(tree, item)
    return RunConfig.from_dict(tree)
