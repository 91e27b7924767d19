"""Strict run configuration: one JSON file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Sequence

from .corpus import CorpusConfig
from .model import ModelConfig
from .optim import OptimizerConfig
from .training import ExtensionConfig, PretrainSettings, TrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class ProbeSettings:
    steps: int = 10
    batch_size: int = 32  # 4096 tokens per step at the default length
    sequence_length: int = 128
    last_layers: int = 3  # similarity over the last blocks; 0 means all blocks
    workers: int = 1


@dataclass
class ClusterSettings:
    k: int = 4
    method: str = "greedy"  # greedy | exhaustive


@dataclass
class BaselineSettings:
    steps: int = -1  # -1: stage1_steps + stage2_steps (equal budget)


@dataclass
class AdaptationConfig:
    language: str = ""  # empty: first new language in the corpus
    steps: int = 500
    router_mode: str = "full"  # full | new_column | frozen
    router_init: str = "copy"  # copy | zero
    noise_std: float = 0.01
    routing: str = "hard"  # hard | soft
    lapt_steps: int = -1  # -1: same as steps


@dataclass
class EvaluationConfig:
    max_chars: int = 8192  # per language; 0 means the full held-out split
    batch_size: int = 16
    sequence_length: int = 0  # 0: model max sequence length
    routing: str = "soft"  # soft | hard_expert:<e>


SECTIONS: dict[str, type] = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "pretrain": PretrainSettings,
    "probe": ProbeSettings,
    "clustering": ClusterSettings,
    "extension": ExtensionConfig,
    "training": TrainSettings,
    "optimizer": OptimizerConfig,
    "baseline": BaselineSettings,
    "adaptation": AdaptationConfig,
    "evaluation": EvaluationConfig,
}


def _default_run_dir() -> str:
    return os.environ.get("DMOE_RUN_DIR", "run")


@dataclass
class RunConfig:
    seed: int = 0
    name: str = "default"
    run_dir: str = field(default_factory=_default_run_dir)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    clustering: ClusterSettings = field(default_factory=ClusterSettings)
    extension: ExtensionConfig = field(default_factory=ExtensionConfig)
    training: TrainSettings = field(default_factory=TrainSettings)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def root(self) -> Path:
        return Path(self.run_dir) / self.name

    def to_dict(self) -> dict:
        return asdict(self)

    def content(self) -> dict:
        """Everything except where the run lives (run_dir, name); this is what artifacts hash."""
        d = self.to_dict()
        d.pop("run_dir")
        d.pop("name")
        return d


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    defaults = cls()
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            default = getattr(defaults, f.name)
            if is_dataclass(default):
                kwargs[f.name] = _build(type(default), data[f.name], f"{where}.{f.name}" if where else f.name)
            else:
                kwargs[f.name] = _coerce(data[f.name], default, f"{where}.{f.name}" if where else f.name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` (or top-level ``key=value``) overrides; values parse as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override {key!r}: unknown section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        if isinstance(node[parts[-1]], dict):
            raise ConfigError(f"override {key!r} names a section, not a key")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(data)
