"""Run configuration: one JSON document with a version key and four sections.

Example::

    {"version": 1,
     "data": {"seed": 0, "train": 64, "val": 16, "test": 16, "kappa": 1000.0},
     "phantom": {...PhantomSpec fields...},
     "net": {...NetConfig fields...},
     "train": {...TrainConfig fields, "weights": {...}}}

Every section and key is optional; unknown ones are rejected. ``--set
section.key=value`` overrides parse ``value`` as JSON, falling back to a
plain string.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dosesim import PhantomSpec
from .losses import LossWeights
from .nets import ConfigError, NetConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    train: int = 64
    val: int = 16
    test: int = 16
    kappa: float = 1000.0

    def validate(self) -> "DataConfig":
        if min(self.train, self.val, self.test) < 0 or self.train + self.val + self.test == 0:
            raise ConfigError("split sizes must be non-negative and not all zero")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a non-negative 64-bit integer")
        return self

    @property
    def split_plan(self) -> dict[str, int]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        try:
            self.data.validate()
            self.phantom.validate()
            self.net.validate()
            self.train.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.phantom.extent != self.net.volume_extent:
            raise ConfigError(
                f"phantom.extent {self.phantom.extent} != net.volume_extent {self.net.volume_extent}")
        return self

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "data": asdict(self.data),
            "phantom": self.phantom.to_dict(),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


_SECTIONS = {"data": DataConfig, "phantom": PhantomSpec, "net": NetConfig, "train": TrainConfig}


def _build(section: str, values: dict):
    cls = _SECTIONS[section]
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    values = dict(values)
    if section == "train" and "weights" in values:
        w = values["weights"]
        if not isinstance(w, dict):
            raise ConfigError("train.weights must be an object")
        wknown = {f.name for f in fields(LossWeights)}
        if set(w) - wknown:
            raise ConfigError(f"unknown keys in 'train.weights': {sorted(set(w) - wknown)}")
        try:
            values["weights"] = LossWeights(**w)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"version"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    parts = {name: _build(name, doc[name]) for name in _SECTIONS if name in doc}
    return RunConfig(**parts).validate()


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = json.loads(json.dumps(doc))
    for text in overrides:
        path, value = parse_override(text)
        if len(path) < 2:
            raise ConfigError(f"override {text!r} must name a section and a key")
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return doc


def load(path: str | os.PathLike | None, overrides: list[str] = ()) -> RunConfig:
    """Read a config file (or start from defaults when ``path`` is None) and apply overrides."""
    if path is None:
        doc: dict = {"version": CONFIG_VERSION}
    else:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(apply_overrides(doc, list(overrides)))
