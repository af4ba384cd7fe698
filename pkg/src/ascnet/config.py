"""Run configuration: one TOML file with flat key groups.

    seed = 0
    out_dir = "runs/desk"

    [corpus]   # CorpusConfig fields except seed
    [model]    # EncoderConfig
    [train]    # TrainConfig except seed
    [augment]  # AugmentConfig
    [eval]     # EvalConfig

Every section and key is optional; unknown sections or keys are errors.
The top-level ``seed`` seeds both the corpus and training.
"""
from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import EncoderConfig
from .pretrain import TrainConfig
from .synthcorpus import AugmentConfig, CorpusConfig

RESOLVED = "resolved_config.json"


@dataclass
class EvalConfig:
    n_clips: int = 10
    query_frac: float = 0.2
    ks: tuple[int, ...] = (1, 5, 10, 20, 50)
    space: str = "encoder"
    probe_epochs: int = 200
    probe_lr: float = 0.5
    clips_per_speed: int = 2
    finetune_epochs: int = 10
    finetune_lr: float = 0.05

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if self.space not in ("encoder", "appearance", "speed"):
            raise ConfigError(f"eval.space must be encoder, appearance or speed, got {self.space!r}")
        if not 0 < self.query_frac < 1:
            raise ConfigError("eval.query_frac must lie in (0, 1)")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.out_dir) / "corpus"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "corpus": {k: v for k, v in asdict(self.corpus).items() if k != "seed"},
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "augment": self.augment.to_dict(),
            "eval": {**asdict(self.eval), "ks": list(self.eval.ks)},
        }

    def write_resolved(self, out_dir: str | os.PathLike | None = None) -> Path:
        path = Path(out_dir or self.out_dir) / RESOLVED
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


_SECTIONS = {"corpus": CorpusConfig, "model": EncoderConfig, "train": TrainConfig,
             "augment": AugmentConfig, "eval": EvalConfig}
_SEEDED = ("corpus", "train")


def _section(name: str, raw, seed: int):
    cls = _SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(cls)}
    if name in _SEEDED:
        allowed.discard("seed")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kw = dict(raw)
    if name in _SEEDED:
        kw["seed"] = seed
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def config_from_dict(raw: dict, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Build a RunConfig; ``seed`` and ``out_dir`` override the file's values."""
    unknown = sorted(set(raw) - {"seed", "out_dir", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    parts = {name: _section(name, raw.get(name, {}), seed) for name in _SECTIONS}
    return RunConfig(seed=seed, out_dir=str(out_dir or raw.get("out_dir", RunConfig.out_dir)), **parts)


def load_config(path: str | os.PathLike, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return config_from_dict(raw, seed, out_dir)
