"""Run configuration: a YAML file with nested sections.

Every section maps onto one dataclass; keys a section does not know are
rejected so a typo never silently falls back to a default. The config hash
is a digest of the canonical JSON form of everything that influences
numbers (the output directory is excluded).

Example::

    seed: 0
    out_dir: runs/smoke
    world: {grid: [6, 6], distractor_range: [0, 4]}
    model: {d: 32, n_fusion: 2}
    loss: {w_inter: 0.1}
    optimizer: {lr: 0.003}
    schedule: {stage1_steps: 150, stage2_steps: 50}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .losses import LossWeights
from .model import ModelConfig
from .synthworld import WorldConfig
from .train import AdaptConfig, DataMix, OptimizerConfig, PretrainConfig


class RunConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    stage1_steps: int = 600
    stage2_steps: int = 200
    checkpoint_every: int = 0
    log_every: int = 1


@dataclass
class PseudoConfig:
    n_captions: int = 100
    threshold: float = 0.5


@dataclass
class TaskConfig:
    n_train: int = 40
    n_test: int = 60
    seed: int = 1234


@dataclass
class EvalConfig:
    shots: tuple = (0, 1, 3, 5, 10, "all")
    modes: tuple[str, ...] = ("prompt", "full")
    workers: int = 1


# model fields that follow from the world and are never set by hand
_DERIVED_MODEL_KEYS = {"img_dim", "grid", "vocab_size"}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataMix = field(default_factory=DataMix)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def pretrain_config(self) -> PretrainConfig:
        s = self.schedule
        return PretrainConfig(s.stage1_steps, s.stage2_steps, self.loss, self.optimizer, self.data,
                              s.checkpoint_every, s.log_every)

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        for k in _DERIVED_MODEL_KEYS:
            d["model"].pop(k)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _tupled(value, default):
    """Lists from YAML become tuples wherever the default is a tuple."""
    if isinstance(default, tuple) and isinstance(value, list):
        inner = default[0] if default else None
        return tuple(_tupled(v, inner) for v in value)
    return value


def _build(cls, raw: Any, section: str, drop: set[str] = frozenset()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise RunConfigError(f"section {section!r} must be a mapping")
    known = {f.name: f for f in fields(cls) if f.name not in drop}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise RunConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _tupled(v, getattr(defaults, k)) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise RunConfigError(f"invalid {section!r} section: {e}") from e


_SECTIONS = {
    "loss": LossWeights,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "data": DataMix,
    "pseudo": PseudoConfig,
    "task": TaskConfig,
    "eval": EvalConfig,
}


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise RunConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    world_raw = raw.get("world") or {}
    if not isinstance(world_raw, dict):
        raise RunConfigError("section 'world' must be a mapping")
    bad = sorted(set(world_raw) - {f.name for f in fields(WorldConfig)})
    if bad:
        raise RunConfigError(f"unknown key(s) in 'world': {', '.join(bad)}")
    try:
        world = WorldConfig.from_dict(world_raw)
    except (TypeError, ValueError, KeyError) as e:
        raise RunConfigError(f"invalid 'world' section: {e}") from e

    model_raw = dict(raw.get("model") or {})
    fixed = _DERIVED_MODEL_KEYS & set(model_raw)
    if fixed:
        raise RunConfigError(f"model keys {sorted(fixed)} follow from the world and cannot be set")
    model_raw.update(img_dim=world.feature_dim, grid=list(world.grid))
    model = _build(ModelConfig, model_raw, "model")

    adapt_raw = dict(raw.get("adapt") or {})
    weights = adapt_raw.pop("weights", None)
    adapt = _build(AdaptConfig, adapt_raw, "adapt", drop={"weights"})
    if weights is not None:
        adapt.weights = _build(LossWeights, weights, "adapt.weights")

    parts = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(seed=raw.get("seed", 0), out_dir=str(raw.get("out_dir", "runs/default")),
                    world=world, model=model, adapt=adapt, **parts)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise RunConfigError("seed must be a non-negative integer")
    s = cfg.schedule
    if s.stage1_steps < 0 or s.stage2_steps < 0 or s.checkpoint_every < 0 or s.log_every < 1:
        raise RunConfigError("schedule step counts must be non-negative (log_every >= 1)")
    d = cfg.data
    if d.batch_size < 1 or not 0 <= d.mask_rate < 1:
        raise RunConfigError("data.batch_size must be >= 1 and data.mask_rate in [0, 1)")
    bad = set(d.streams) - {"detection", "grounding", "pseudo"}
    if not d.streams or bad:
        raise RunConfigError(f"data.streams must name detection/grounding/pseudo, got {list(d.streams)}")
    if not 0 < cfg.pseudo.threshold < 1:
        raise RunConfigError("pseudo.threshold must lie in (0, 1)")
    if cfg.adapt.steps < 0 or cfg.adapt.batch_size < 1:
        raise RunConfigError("adapt.steps must be >= 0 and adapt.batch_size >= 1")
    if cfg.adapt.prompt_level not in ("embedding", "features"):
        raise RunConfigError("adapt.prompt_level must be 'embedding' or 'features'")
    for k in cfg.eval.shots:
        if k != "all" and not (isinstance(k, int) and k >= 0):
            raise RunConfigError(f"eval.shots entries must be counts or 'all', got {k!r}")
    if set(cfg.eval.modes) - {"prompt", "full"}:
        raise RunConfigError("eval.modes must be drawn from prompt/full")
    if cfg.eval.workers < 1:
        raise RunConfigError("eval.workers must be >= 1")
    if cfg.model.max_text_len < 2:
        raise RunConfigError("model.max_text_len too small")


def load(path: str | Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise RunConfigError(f"cannot parse {path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise RunConfigError("config root must be a mapping")
    return from_dict(raw)
