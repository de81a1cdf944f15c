"""Run configuration: sectioned ``key = value`` files plus overrides.

Sections map onto the component configs::

    [model]   ModelConfig fields
    [train]   TrainConfig fields
    [optics]  OpticsConfig fields (angles/phases as comma lists)
    [noise]   NoiseConfig fields (photon_scale = none -> regime default)
    [data]    DataConfig fields (dataset root, output dir, sizes, seed)

Every key has a default, unknown sections or keys raise ``ConfigError`` and
``dump`` writes the fully resolved view that ``load`` reads back unchanged.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError, LoadError
from .model import ModelConfig
from .synth import NoiseConfig, OpticsConfig
from .train import TrainConfig

RESOLVED_NAME = "config.resolved.ini"


@dataclass
class DataConfig:
    root: str = "data"
    out: str = "runs/default"
    lr_size: int = 64
    style: str = "filaments"
    train_samples: int = 64
    test_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr_size < 1 or self.train_samples < 0 or self.test_samples < 0:
            raise ConfigError("lr_size must be >= 1 and sample counts >= 0")
        if self.style not in ("filaments", "puncta"):
            raise ConfigError(f"style must be filaments or puncta, got {self.style!r}")


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "optics": OpticsConfig,
    "noise": NoiseConfig,
    "data": DataConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _float(text: str) -> float:
    return float(Fraction(text)) if "/" in text else float(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(default: Any, text: str) -> Any:
    text = text.strip()
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return _float(text)
    if isinstance(default, tuple):
        return tuple(_float(v) for v in text.split(",") if v.strip())
    if default is None:  # optional float
        return None if text.lower() == "none" else _float(text)
    return text


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _defaults(cls) -> dict[str, Any]:
    """Declared defaults (``None`` kept for optional fields) keyed by name."""
    inst = cls()
    return {
        f.name: f.default if f.default is not dataclasses.MISSING else getattr(inst, f.name)
        for f in dataclasses.fields(cls)
    }


def keys() -> dict[str, list[str]]:
    return {s: list(_defaults(cls)) for s, cls in SECTIONS.items()}


def resolve_key(key: str) -> tuple[str, str]:
    """Map ``section.key`` or an unambiguous bare key to (section, key)."""
    key = key.replace("-", "_")
    table = keys()
    if "." in key:
        section, name = key.split(".", 1)
        if section in table and name in table[section]:
            return section, name
        raise ConfigError(f"unknown config key {key!r}")
    owners = [s for s, names in table.items() if key in names]
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous config key {key!r}; qualify it as one of " + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


def build(values: dict[str, dict[str, str]]) -> RunConfig:
    """Construct a RunConfig from raw section -> key -> text values."""
    parts = {}
    for section, cls in SECTIONS.items():
        defaults = _defaults(cls)
        kwargs = {}
        for key, text in values.get(section, {}).items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                kwargs[key] = _parse_value(defaults[key], text)
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
        try:
            parts[section] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {e}") from None
    unknown = set(values) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return RunConfig(**parts)


def load(path: str | os.PathLike | None = None, overrides: Iterable[tuple[str, str]] = ()) -> RunConfig:
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as e:
            raise LoadError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        values = {s: dict(parser[s]) for s in parser.sections()}
    for key, text in overrides:
        section, name = resolve_key(key)
        values.setdefault(section, {})[name] = text
    return build(values)


def to_text(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def dump(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    """Write the resolved config into ``out_dir``; returns the file path."""
    path = Path(out_dir) / RESOLVED_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(to_text(cfg), encoding="utf-8", newline="\n")
    except OSError as e:
        raise LoadError(f"cannot write {path}: {e}") from e
    return path
