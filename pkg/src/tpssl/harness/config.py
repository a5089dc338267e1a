"""Experiment configuration.

Configs are flat key/value text. Keys carry a dotted section prefix, written
either inline (``ssl.confidence_threshold = 0.95``) or under an INI header
(``[ssl]`` followed by ``confidence_threshold = 0.95``). ``#`` and ``;`` start
comments. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..augment import PhotometricPolicy
from ..contrastive import ContrastiveConfig
from ..ssl import SSLConfig
from ..errors import ConfigurationError
from .data import DatasetSpec


@dataclass
class RunConfig:
    seeds: tuple[int, ...] = (0,)
    init: str = "random"
    target_pretrain: bool = True
    threads: int = 1
    out: str = "runs"

    def __post_init__(self):
        if self.init not in ("random", "generic"):
            raise ValueError(f"run.init must be 'random' or 'generic', got {self.init!r}")


@dataclass
class SplitConfig:
    n_labeled: int = 16


@dataclass
class SweepConfig:
    snapshots: tuple[int, ...] = (0,)
    label_budgets: tuple[int, ...] = (16,)


@dataclass
class TransferConfig:
    appearances: tuple[str, ...] = ("warm_on_dark", "cool_on_light")


@dataclass
class EvalConfig:
    metrics: tuple[str, ...] = ("accuracy",)


def _generic_data() -> DatasetSpec:
    return DatasetSpec(n_classes=8, n_samples=4000, n_test=0, seed=1000, appearance="generic")


def _generic_pretrain() -> ContrastiveConfig:
    return ContrastiveConfig(anchor_weight=0.0, epochs=20, batch_size=128, lr=0.1)


def _view_policy() -> PhotometricPolicy:
    return PhotometricPolicy()


@dataclass
class ExperimentConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain_data: DatasetSpec = field(default_factory=_generic_data)
    split: SplitConfig = field(default_factory=SplitConfig)
    pretrain: ContrastiveConfig = field(default_factory=_generic_pretrain)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: PhotometricPolicy = field(default_factory=_view_policy)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not self.run.seeds:
            raise ConfigurationError("run.seeds must not be empty")
        if self.run.threads < 1:
            raise ConfigurationError("run.threads must be >= 1")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            sub = getattr(self, f.name)
            out[f.name] = sub.to_dict() if isinstance(sub, DatasetSpec) else dataclasses.asdict(sub)
        return out

    def hash(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _parse_lines(text: str, origin: str) -> dict[str, str]:
    flat: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        full = f"{section}.{key}" if section and "." not in key else key
        if full in flat:
            raise ConfigurationError(f"{origin}:{lineno}: duplicate key {full!r}")
        flat[full] = value
    return flat


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",")] if value else []
            parts = [p for p in parts if p]
            proto = default[0] if default else ""
            return tuple(_coerce(p, proto, key) for p in parts)
        if default is None:
            return None if value.lower() in ("", "none") else value
        return value
    except ValueError as exc:
        raise ConfigurationError(f"bad value {value!r} for {key}") from exc


def _apply(obj, updates: dict[str, str], section: str):
    names = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in updates.items():
        if key not in names:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        default = getattr(obj, key)
        if section.endswith("data") and key == "image_size":
            changes[key] = tuple(int(v) for v in value.replace("x", ",").split(","))
        elif key == "crop_scale":
            # Optional range: "none" disables cropping.
            none = value.lower() in ("", "none")
            changes[key] = None if none else _coerce(value, (0.0,), f"{section}.{key}")
        else:
            changes[key] = _coerce(value, default, f"{section}.{key}")
    try:
        return replace(obj, **changes)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc


def parse_config(text: str, origin: str = "<config>",
                 base: ExperimentConfig | None = None) -> ExperimentConfig:
    flat = _parse_lines(text, origin)
    cfg = base or ExperimentConfig()
    sections = {f.name for f in fields(cfg)}
    grouped: dict[str, dict[str, str]] = {}
    for key, value in flat.items():
        if "." not in key:
            raise ConfigurationError(f"{origin}: key {key!r} needs a section prefix")
        sec, name = key.split(".", 1)
        if sec not in sections:
            raise ConfigurationError(f"{origin}: unknown config section {sec!r}")
        grouped.setdefault(sec, {})[name] = value
    changes = {sec: _apply(getattr(cfg, sec), upd, sec) for sec, upd in grouped.items()}
    try:
        return replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, dict):
                continue
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
