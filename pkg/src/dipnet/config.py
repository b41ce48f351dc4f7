"""Flat ``key = value`` run configuration.

One document holds training, model and dataset settings plus ``out_dir``.
Lines starting with ``#`` (and text after `` #``) are comments. Tuples are
comma-separated. A ``preset`` key (``desk`` or ``paper``) picks the defaults
that the other keys override.

Seed precedence, highest first: ``--seed``/``--set seed=``, the
``DIPNET_SEED`` environment variable, the file, the preset default.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

from .data import DatasetSpec
from .model import ModelConfig
from .train.trainer import TrainConfig

SEED_ENV = "DIPNET_SEED"
PRESETS = ("desk", "paper")
RUN_KEYS = ("preset", "out_dir")


class ConfigError(ValueError):
    """Malformed document, unknown key or invalid value."""


def _section_fields(cls) -> Dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


SECTIONS = {"train": TrainConfig, "model": ModelConfig, "data": DatasetSpec}
FIELD_TYPES = {name: _section_fields(cls) for name, cls in SECTIONS.items()}
KEY_SECTION = {key: section for section, types in FIELD_TYPES.items() for key in types}
assert len(KEY_SECTION) == sum(len(t) for t in FIELD_TYPES.values()), "config keys must be unique"
assert not set(RUN_KEYS) & set(KEY_SECTION)
ALL_KEYS = tuple(RUN_KEYS) + tuple(KEY_SECTION)


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Raw ``{key: value}`` strings; duplicate keys and malformed lines are errors."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        out[key] = value
    return out


def check_keys(keys) -> None:
    unknown = sorted(set(keys) - set(ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")


def _convert(key: str, text: str, kind):
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    try:
        if origin is typing.Union:  # Optional[str]
            return None if text.lower() in ("", "none") else _convert(key, text, args[0])
        if origin is tuple:
            item = args[0]
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_convert(key, p, item) for p in parts)
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true/false")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None


def _preset_values(preset: str) -> Dict[str, Dict[str, object]]:
    if preset == "desk":
        mc, tc, ds = ModelConfig.desk(), TrainConfig.desk(), DatasetSpec(patch_size=32)
    elif preset == "paper":
        mc, tc, ds = ModelConfig(), TrainConfig(), DatasetSpec()
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    vals = {}
    for section, obj in (("train", tc), ("model", mc), ("data", ds)):
        vals[section] = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return vals


@dataclass
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    data: DatasetSpec
    out_dir: str = "runs/dipnet"
    preset: str = "desk"

    def items(self) -> List[tuple]:
        rows = [("preset", self.preset), ("out_dir", self.out_dir)]
        for section in SECTIONS:
            obj = getattr(self, section)
            rows += [(f.name, getattr(obj, f.name)) for f in fields(obj)]
        return rows

    def to_text(self) -> str:
        """Fully resolved document; parsing it reproduces this configuration."""
        lines = ["# resolved configuration"]
        for key, value in self.items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve(file_values: Mapping[str, str] = None, overrides: Mapping[str, str] = None,
            env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Merge preset defaults, file values, ``DIPNET_SEED`` and overrides."""
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    env = os.environ if env is None else env
    check_keys(file_values)
    check_keys(overrides)
    merged = dict(file_values)
    if SEED_ENV in env and env[SEED_ENV].strip():
        merged["seed"] = env[SEED_ENV].strip()
    merged.update(overrides)

    preset = merged.pop("preset", "desk")
    out_dir = merged.pop("out_dir", "runs/dipnet")
    values = _preset_values(preset)
    for key, text in merged.items():
        section = KEY_SECTION[key]
        values[section][key] = _convert(key, text, FIELD_TYPES[section][key])

    # the noise classifier has one class per training noise level unless set explicitly
    if "num_noise_classes" not in merged:
        values["model"]["num_noise_classes"] = len(values["train"]["sigma_set"])
    try:
        return RunConfig(TrainConfig(**values["train"]), ModelConfig(**values["model"]),
                         DatasetSpec(**values["data"]), out_dir, preset)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path=None, overrides: Sequence[str] = (), env=None) -> RunConfig:
    file_values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        file_values = parse_text(text, str(path))
    return resolve(file_values, parse_overrides(overrides), env)
