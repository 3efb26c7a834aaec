"""Training configuration and its flat dotted-key JSON form.

Nested settings are addressed as ``sampler.subbag_size``, ``losses.alpha``
and so on. The short names used in hyperparameter tables (``bag_size``,
``lr``, ``margin``, ...) are accepted as aliases.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .losses import LossConfig
from .models import AccumulatorConfig, ExtractorConfig
from .sampling import SamplerConfig

__all__ = ["TrainConfig", "ConfigError", "ALIASES", "flatten", "load_flat_json"]


class ConfigError(ValueError):
    """Unknown key or invalid value in a configuration."""


# short name -> dotted key(s); "margin" feeds both margins unless m_align is set explicitly
ALIASES: dict[str, tuple[str, ...]] = {
    "bag_size": ("sampler.subbag_size",),
    "batch_size": ("sampler.batch_size",),
    "distance": ("losses.distance",),
    "fixbase": ("fixbase_epochs",),
    "fixbase_epoch": ("fixbase_epochs",),
    "lr": ("learning_rate",),
    "margin": ("losses.m_triplet", "losses.m_align"),
    "m_triplet": ("losses.m_triplet",),
    "m_align": ("losses.m_align",),
    "feature_norm": ("extractor.feature_norm",),
    "alpha": ("losses.alpha",),
    "beta": ("losses.beta",),
    "gamma": ("losses.gamma",),
    "accumulator": ("accumulator.kind",),
    "embed_dim": ("extractor.embed_dim",),
    "patience": ("early_stop_patience",),
}

_SECTIONS = {
    "sampler": SamplerConfig,
    "losses": LossConfig,
    "extractor": ExtractorConfig,
    "accumulator": AccumulatorConfig,
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 10
    fixbase_epochs: int = 0
    early_stop_patience: int = 5
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    accumulator: AccumulatorConfig = field(default_factory=AccumulatorConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.fixbase_epochs <= self.epochs:
            raise ConfigError(f"need 0 <= fixbase_epochs ({self.fixbase_epochs}) <= epochs ({self.epochs})")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.sampler.batch_size < 4:
            # two labels with two sub-bags each is the smallest batch holding a triplet
            raise ConfigError(f"batch_size must be >= 4 for training, got {self.sampler.batch_size}")

    def to_flat(self) -> dict[str, Any]:
        return flatten(self)

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        merged = flatten(base or cls())
        merged.update(_resolve_keys(flat))
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
        for key, value in merged.items():
            section, _, leaf = key.partition(".")
            if leaf:
                nested[section][leaf] = value
            else:
                top[key] = value
        try:
            parts = {name: typ(**nested[name]) for name, typ in _SECTIONS.items()}
            return cls(**top, **parts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **flat: Any) -> "TrainConfig":
        """Return a copy with dotted keys or aliases overridden (use ``__`` for dots)."""
        return TrainConfig.from_flat({k.replace("__", "."): v for k, v in flat.items()}, base=self)

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True)


def flatten(cfg: TrainConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for k, v in dataclasses.asdict(value).items():
                out[f"{f.name}.{k}"] = list(v) if isinstance(v, tuple) else v
        else:
            out[f.name] = value
    return out


def _valid_keys() -> set[str]:
    return set(flatten(TrainConfig()))


def _resolve_keys(flat: Mapping[str, Any]) -> dict[str, Any]:
    valid = _valid_keys()
    unknown = sorted(k for k in flat if k not in valid and k not in ALIASES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    # shared "margin" first, then other aliases, then dotted keys, so the more specific key wins
    rank = {"margin": 0}
    out: dict[str, Any] = {}
    for key in sorted(flat, key=lambda k: rank.get(k, 1 if k in ALIASES else 2)):
        for target in ALIASES.get(key, (key,)):
            out[target] = flat[key]
    return out


def load_flat_json(path: str | Path) -> dict[str, Any]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    return obj
