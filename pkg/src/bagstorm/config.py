"""Strict JSON run configuration.

Missing keys take the defaults below (standard defaults for the attack and
defence; pilot-calibrated recipe for the toy model).  Unknown keys and
out-of-range values are rejected before any work starts.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

from .attacks import AttackConfig
from .data import GenConfig
from .errors import ConfigurationError


@dataclass(frozen=True)
class DataSection:
    n_slides: int = 200
    n_patches: int = 64
    tumor_slide_fraction: float = 0.5
    tumor_patch_fraction: float = 0.1
    texture_families: int = 4
    noise_scale: float = 0.1
    patch_shape: tuple[int, int, int] = (8, 8, 3)
    dominant_fraction: float = 0.75
    blob_amplitude: float = 0.6
    patch_cap: int = 7000
    seed: int | None = None  # defaults to master_seed


@dataclass(frozen=True)
class ModelSection:
    enc_hidden: int = 32
    feature_dim: int = 32
    attn_hidden: int = 16
    rep_dim: int = 16
    head_hidden: int = 16
    pretrain_tasks: tuple[str, ...] = ("A", "B")
    pretrain_epochs: int = 150
    head_epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 8
    train_fraction: float = 0.6


@dataclass(frozen=True)
class AttackSection:
    method: str = "bim"
    epsilon: float = 4 / 255
    alpha: float = 1 / 255
    T: int = 20
    mu: float = 0.9
    c: float = 1.0
    K: int = 1
    strategy: str = "parallel"
    init_scale: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    tasks: tuple[str, ...] = ("A", "B")
    repeats: int = 4
    formats: tuple[str, ...] = ("csv", "json")
    sweep_axis: str = "K"
    sweep_values: tuple[float, ...] | None = None
    strategies: tuple[str, ...] = ("sequential", "parallel")
    patches_per_slide: int = 16
    model_tag: str = "toy-gated-attn"


@dataclass(frozen=True)
class DefenceSection:
    amplitude: float = 1 / 255


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    defence: DefenceSection = field(default_factory=DefenceSection)
    master_seed: int = 0
    output_dir: str | None = None

    def gen_config(self) -> GenConfig:
        d = asdict(self.data)
        seed = d.pop("seed")
        return GenConfig(**d, seed=self.master_seed if seed is None else seed)

    def attack_config(self, seed: int = 0) -> AttackConfig:
        return AttackConfig(**asdict(self.attack), seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "attack": AttackSection,
    "eval": EvalSection,
    "defence": DefenceSection,
}


def _bad(key: str, value: Any, rule: str):
    raise ConfigurationError(f"{key}: {value!r} must satisfy {rule}")


def _number(key: str, value) -> float:
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            _bad(key, value, "a number or a fraction string like '4/255'")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _bad(key, value, "a number")
    return float(value)


def _coerce(key: str, default, value):
    """Convert a JSON value to the type of the section default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            _bad(key, value, "a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            _bad(key, value, "an integer")
        return value
    if isinstance(default, float):
        return _number(key, value)
    if isinstance(default, str):
        if not isinstance(value, str):
            _bad(key, value, "a string")
        return value
    if isinstance(default, tuple) or default is None:
        if value is None:
            return None
        if not isinstance(value, list):
            _bad(key, value, "a list" if default is not None else "an integer or null")
        return tuple(value)
    return value


def _section(name: str, cls, raw) -> Any:
    if not isinstance(raw, dict):
        _bad(name, raw, "a JSON object")
    known = {f.name: f for f in fields(cls)}
    base = cls()
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigurationError(f"{name}.{key}: unknown key")
        default = getattr(base, key)
        if key == "seed" and name == "data":
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                _bad(f"{name}.{key}", value, "an integer or null")
            values[key] = value
        elif key == "sweep_values":
            values[key] = None if value is None else tuple(_number(f"{name}.{key}", v) for v in value)
        else:
            values[key] = _coerce(f"{name}.{key}", default, value)
    return replace(base, **values)


def validate(cfg: RunConfig) -> None:
    cfg.gen_config().validate()
    m = cfg.model
    for key in ("enc_hidden", "feature_dim", "attn_hidden", "rep_dim", "head_hidden", "batch_size"):
        if getattr(m, key) < 1:
            _bad(f"model.{key}", getattr(m, key), f"{key} >= 1")
    for key in ("pretrain_epochs", "head_epochs"):
        if getattr(m, key) < 0:
            _bad(f"model.{key}", getattr(m, key), f"{key} >= 0")
    if not m.lr >= 0:
        _bad("model.lr", m.lr, "lr >= 0")
    if not 0 < m.train_fraction < 1:
        _bad("model.train_fraction", m.train_fraction, "0 < train_fraction < 1")
    for t in m.pretrain_tasks:
        if t not in ("A", "B"):
            _bad("model.pretrain_tasks", list(m.pretrain_tasks), "tasks drawn from A, B")
    cfg.attack_config().validate(cfg.data.n_patches)
    e = cfg.eval
    if not e.tasks or any(t not in ("A", "B") for t in e.tasks):
        _bad("eval.tasks", list(e.tasks), "a non-empty list drawn from A, B")
    if e.repeats < 1:
        _bad("eval.repeats", e.repeats, "repeats >= 1")
    if any(f not in ("csv", "json") for f in e.formats):
        _bad("eval.formats", list(e.formats), "entries 'csv' or 'json'")
    if e.sweep_axis not in ("K", "epsilon"):
        _bad("eval.sweep_axis", e.sweep_axis, "'K' or 'epsilon'")
    if any(s not in ("sequential", "parallel") for s in e.strategies) or not e.strategies:
        _bad("eval.strategies", list(e.strategies), "a non-empty list of 'sequential'/'parallel'")
    if e.sweep_values is not None and list(e.sweep_values) != sorted(e.sweep_values):
        _bad("eval.sweep_values", list(e.sweep_values), "ascending order")
    if e.patches_per_slide < 1:
        _bad("eval.patches_per_slide", e.patches_per_slide, "patches_per_slide >= 1")
    if cfg.defence.amplitude < 0:
        _bad("defence.amplitude", cfg.defence.amplitude, "amplitude >= 0")


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        _bad("config", raw, "a JSON object")
    values: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            values[key] = _section(key, _SECTIONS[key], value)
        elif key == "master_seed":
            if isinstance(value, bool) or not isinstance(value, int):
                _bad(key, value, "an integer")
            values[key] = value
        elif key == "output_dir":
            if value is not None and not isinstance(value, str):
                _bad(key, value, "a string or null")
            values[key] = value
        else:
            raise ConfigurationError(f"{key}: unknown key")
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)
