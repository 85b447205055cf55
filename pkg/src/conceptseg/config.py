"""Run configuration: one JSON file, full defaults, unknown keys rejected.

CLI flags override file values. Every section maps onto the owning
module's config dataclass.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .lm import LmConfig
from .shapeworld import GenConfig
from .training import LossWeights, TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InferConfig:
    threshold: float = 0.7
    max_response_len: int = 96


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "muse"  # muse | grefcoco | video

    def __post_init__(self) -> None:
        if self.protocol not in ("muse", "grefcoco", "video"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")


@dataclass
class RunConfig:
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "gen": dataclasses.asdict(self.gen),
            "lm": dataclasses.asdict(self.lm),
            "decoder": dataclasses.asdict(self.decoder),
            "train": dataclasses.asdict(self.train),
            "weights": dataclasses.asdict(self.weights),
            "infer": dataclasses.asdict(self.infer),
            "eval": dataclasses.asdict(self.eval),
        }


_SECTIONS = {
    "gen": GenConfig,
    "lm": LmConfig,
    "decoder": DecoderConfig,
    "train": TrainerConfig,
    "weights": LossWeights,
    "infer": InferConfig,
    "eval": EvalConfig,
}


def _build_section(cls, obj: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    if cls is GenConfig:
        return GenConfig.from_json(obj)
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def config_from_dict(obj: dict) -> RunConfig:
    known = set(_SECTIONS) | {"seed"}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    if "seed" in obj:
        if not isinstance(obj["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = obj["seed"]
    for section, cls in _SECTIONS.items():
        if section in obj:
            if not isinstance(obj[section], dict):
                raise ConfigError(f"section {section!r} must be an object")
            kwargs[section] = _build_section(cls, obj[section], section)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"config file {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(obj)
