"""Run configuration: one YAML document per run, overridable from the command line."""

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .losses import LossConfig, default_delta
from .model import BackboneConfig
from .selftrain import TrainConfig
from .smoothing import L0Params


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the field or path."""


@dataclass
class RunConfig:
    dataset_dir: str = None
    output_dir: str = None
    manifest: str = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    l0: L0Params = field(default_factory=L0Params)
    # Canny thresholds in 8-bit intensity units
    canny_high: tuple = (200.0, 300.0)
    canny_low: tuple = (20.0, 40.0)
    epochs_phase1: int = 10
    epochs_per_round: int = 5
    termination_pct: float = 2.0
    max_rounds: int = 10
    min_component: int = 30
    lr: float = 1e-4
    batch_size: int = 8
    block: int = 33
    offset: float = 0.02
    t_global: float = 0.5
    seed: int = 0
    # None means one worker per available CPU
    workers: int = None

    def train_config(self):
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs_phase1=self.epochs_phase1,
            epochs_per_round=self.epochs_per_round,
            termination_pct=self.termination_pct,
            max_rounds=self.max_rounds,
            min_component=self.min_component,
            canny_high=tuple(v / 255 for v in self.canny_high),
            canny_low=tuple(v / 255 for v in self.canny_low),
            block=self.block,
            offset=self.offset,
            t_global=self.t_global,
            seed=self.seed,
            workers=self.workers or os.cpu_count() or 1,
        )

    def to_dict(self):
        d = asdict(self)
        d["canny_high"] = list(self.canny_high)
        d["canny_low"] = list(self.canny_low)
        d["loss"]["delta"] = list(self.loss.delta)
        return d

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


_NESTED = {"backbone": BackboneConfig, "loss": LossConfig, "l0": L0Params}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data):
    data = dict(data or {})
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)}")
    kw = {}
    explicit_delta = "delta" in (data.get("loss") or {})
    for name, cls in _NESTED.items():
        if name in data:
            sub = dict(data.pop(name) or {})
            if name == "loss" and "delta" in sub:
                sub["delta"] = tuple(sub["delta"])
            kw[name] = _build(cls, sub, name)
    for key in ("canny_high", "canny_low"):
        if key in data:
            data[key] = tuple(float(v) for v in data[key])
    cfg = RunConfig(**kw, **data)
    if not explicit_delta:
        cfg = align_delta(cfg)
    validate(cfg, check_paths=False)
    return cfg


def load(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(data)


def with_overrides(cfg, **overrides):
    """Apply non-None overrides (command-line flags take precedence over the file)."""
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def align_delta(cfg):
    """Resize the side-output weights when the block count differs from their length."""
    n = cfg.backbone.num_blocks
    if len(cfg.loss.delta) != n:
        cfg = replace(cfg, loss=replace(cfg.loss, delta=default_delta(n)))
    return cfg


def validate(cfg, check_paths=True, need=()):
    def positive(name, value, strict=True):
        if value < 0 or (strict and value == 0):
            raise ConfigError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value}")

    positive("lr", cfg.lr)
    positive("batch_size", cfg.batch_size)
    positive("epochs_phase1", cfg.epochs_phase1, strict=False)
    positive("epochs_per_round", cfg.epochs_per_round, strict=False)
    positive("max_rounds", cfg.max_rounds, strict=False)
    positive("min_component", cfg.min_component, strict=False)
    positive("termination_pct", cfg.termination_pct, strict=False)
    if cfg.workers is not None:
        positive("workers", cfg.workers)
    if cfg.block < 1 or cfg.block % 2 == 0:
        raise ConfigError(f"block must be a positive odd integer, got {cfg.block}")
    for key in ("canny_high", "canny_low"):
        lo, hi = getattr(cfg, key)
        if not 0 <= lo <= hi:
            raise ConfigError(f"{key} must satisfy 0 <= low <= high, got {(lo, hi)}")
    if len(cfg.loss.delta) != cfg.backbone.num_blocks:
        raise ConfigError(
            f"loss.delta has {len(cfg.loss.delta)} entries but backbone.num_blocks is "
            f"{cfg.backbone.num_blocks}"
        )
    for name in need:
        if getattr(cfg, name) is None:
            raise ConfigError(f"{name} is required")
    if check_paths:
        for name in ("dataset_dir", "manifest"):
            value = getattr(cfg, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name}: path does not exist: {value}")
    return cfg
