"""Run configuration: nested dataclasses loaded from JSON with dotted overrides.

Precedence is defaults < config file < ``--set section.key=value``. Unknown
sections or keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .graph import DEFAULT_MAX_DEGREE
from .masking import MASK_MODES, RecoverySchedule


@dataclass
class DataConfig:
    format: str = "jsonl"
    path: str = ""
    name: str = ""
    max_degree: int = DEFAULT_MAX_DEGREE


@dataclass
class HierarchyConfig:
    S: int = 2
    r_p: float = 0.2
    seed: int = 0
    binarize_coarse: bool = False


@dataclass
class RecoveryConfig:
    enabled: bool = True
    r_re: float = 0.5
    t_e: int | None = None  # None -> ceil(epochs / 4)
    gamma: float = 1.0


@dataclass
class MaskConfig:
    r_m: float = 0.5
    mode: str = "cofi"
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)


@dataclass
class ModelConfig:
    d: int = 32
    l_gt: int = 2
    gin_layers: int = 2
    gt_layers: int = 1
    gamma_sce: float = 2.0
    remask_decoder: bool = False
    rwpe_k: int = 8
    decoder_top: str = "gin"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    precision: str = "float32"
    parallel: bool = False


@dataclass
class EvalConfig:
    folds: int = 10
    repeats: int = 1
    readout_mode: str = "aggregate"
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def schedule(self) -> RecoverySchedule:
        rc = self.mask.recovery
        t_e = rc.t_e if rc.t_e is not None else RecoverySchedule.default_end_epoch(self.train.epochs)
        return RecoverySchedule(r_re=rc.r_re, t_e=t_e, gamma=rc.gamma, enabled=rc.enabled)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        checks = [
            ("hierarchy.S", self.hierarchy.S >= 1, "must be >= 1"),
            ("hierarchy.r_p", 0.0 < self.hierarchy.r_p <= 1.0, "must be in (0, 1]"),
            ("mask.r_m", 0.0 <= self.mask.r_m <= 1.0, "must be in [0, 1]"),
            ("mask.mode", self.mask.mode in MASK_MODES, f"must be one of {MASK_MODES}"),
            ("mask.recovery.r_re", 0.0 <= self.mask.recovery.r_re <= 1.0, "must be in [0, 1]"),
            ("mask.recovery.gamma", self.mask.recovery.gamma >= 0, "must be >= 0"),
            ("mask.recovery.t_e", self.mask.recovery.t_e is None or self.mask.recovery.t_e >= 1, "must be >= 1"),
            ("model.d", self.model.d >= 1, "must be >= 1"),
            ("model.l_gt", self.model.l_gt >= 1, "must be >= 1"),
            ("model.gin_layers", self.model.gin_layers >= 1, "must be >= 1"),
            ("model.gt_layers", self.model.gt_layers >= 1, "must be >= 1"),
            ("model.gamma_sce", self.model.gamma_sce > 0, "must be > 0"),
            ("model.rwpe_k", self.model.rwpe_k >= 1, "must be >= 1"),
            ("model.decoder_top", self.model.decoder_top in ("gin", "gt"), "must be 'gin' or 'gt'"),
            ("train.epochs", self.train.epochs >= 1, "must be >= 1"),
            ("train.batch_size", self.train.batch_size >= 1, "must be >= 1"),
            ("train.lr", self.train.lr > 0, "must be > 0"),
            ("train.weight_decay", self.train.weight_decay >= 0, "must be >= 0"),
            ("train.precision", self.train.precision in ("float32", "float64"), "must be float32 or float64"),
            ("eval.folds", self.eval.folds >= 2, "must be >= 2"),
            ("eval.repeats", self.eval.repeats >= 1, "must be >= 1"),
            ("eval.readout_mode", self.eval.readout_mode in ("aggregate", "first-scale"),
             "must be 'aggregate' or 'first-scale'"),
            ("data.format", self.data.format in ("tu", "jsonl"), "must be 'tu' or 'jsonl'"),
            ("data.max_degree", self.data.max_degree >= 0, "must be >= 0"),
        ]
        for name, ok, why in checks:
            if not ok:
                raise ConfigError(f"{name} {why} (got {_get(self, name)!r})", field=name)
        return self


def _get(cfg, dotted: str):
    obj = cfg
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def _coerce(value, current, key: str):
    if value is None:
        return value
    if current is None:
        # only optional integer fields default to None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            raise ConfigError(f"{key} expects an integer or null, got {value!r}", field=key)
        return int(value)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects true/false, got {value!r}", field=key)
    if isinstance(current, (int, float)) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if isinstance(current, int) and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}", field=key)
        return type(current)(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key} has the wrong type: {value!r}", field=key)


def _apply(obj, data: dict, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be an object", field=prefix.rstrip("."))
    names = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        dotted = prefix + key
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}", field=dotted)
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, dotted + ".")
        else:
            setattr(obj, key, _coerce(value, current, dotted))


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one ``section.key=value`` override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    nested: dict = {}
    cursor = nested
    for p in parts[:-1]:
        cursor = cursor.setdefault(p, {})
    cursor[parts[-1]] = _parse_scalar(raw)
    _apply(cfg, nested)


def load_config(path=None, overrides=(), base: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if base:
        _apply(cfg, base)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        _apply(cfg, data)
    for item in overrides:
        apply_override(cfg, item)
    return cfg.validate()


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _apply(cfg, data)
    return cfg.validate()


def describe_defaults() -> str:
    """Flattened ``key = default`` listing for ``--help``."""
    lines = []

    def walk(obj, prefix):
        for f in fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val):
                walk(val, prefix + f.name + ".")
            else:
                shown = "ceil(train.epochs/4)" if prefix + f.name == "mask.recovery.t_e" else json.dumps(val)
                lines.append(f"  {prefix}{f.name} = {shown}")

    walk(RunConfig(), "")
    return "\n".join(lines)
