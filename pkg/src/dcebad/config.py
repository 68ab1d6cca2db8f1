"""Run configuration: built-in defaults < config file < command-line flags.

Config files are JSON objects with three sections, written with sorted keys
and two-space indentation::

    {"model": {...ModelConfig...}, "run": {...}, "train": {...TrainConfig...}}

Any key may be omitted; missing keys take the built-in default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import VARIANTS, ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class RunOptions:
    data: str | None = None
    embeddings: str | None = None
    out: str = "runs/latest"
    split: list[float] = field(default_factory=lambda: [18.0, 1.0, 1.0])
    min_freq: int = 1
    threads: int = 1
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "run": dataclasses.asdict(self.run),
            "train": dataclasses.asdict(self.train),
        }

    def dumps(self) -> str:
        return dumps(self.to_dict())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


ENCODER_KEYS = ("encoder_blocks", "encoder_heads")


def _merge(cls, base: dict[str, Any], overrides: dict[str, Any], section: str) -> dict[str, Any]:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return {**base, **overrides}


def resolve(file_data: dict[str, Any] | None = None, flags: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Layer file values and then flag values over the defaults."""
    file_data = file_data or {}
    flags = flags or {}
    extra = set(file_data) - {"model", "train", "run"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    default = RunConfig().to_dict()
    merged = {}
    explicit_model: set[str] = set()
    for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("run", RunOptions)):
        layer_file = file_data.get(section, {}) or {}
        layer_flags = {k: v for k, v in flags.get(section, {}).items() if v is not None}
        if section == "model":
            explicit_model = set(layer_file) | set(layer_flags)
        merged[section] = _merge(cls, _merge(cls, default[section], layer_file, section), layer_flags, section)
    m = merged["model"]
    if m["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {m['variant']!r}; choose from {', '.join(VARIANTS)}")
    if not VARIANTS[m["variant"]][0]:
        for key in ENCODER_KEYS:
            if key not in explicit_model:
                m[key] = None
    cfg = RunConfig(
        model=ModelConfig.from_dict(m),
        train=TrainConfig(**merged["train"]),
        run=RunOptions(**merged["run"]),
    )
    unknown = [v for v in cfg.run.variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {', '.join(VARIANTS)}")
    return cfg


def load_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data
