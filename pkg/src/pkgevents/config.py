"""Key-value config files (INI sections) mapped onto dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError, MissingArtifactError


def _coerce(name, value: str, annotation):
    text = value.strip()
    if annotation in (int, "int"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{name}: expected integer, got {value!r}") from None
    if annotation in (float, "float"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected number, got {value!r}") from None
    if annotation in (bool, "bool"):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected boolean, got {value!r}")
    if annotation in (str, "str"):
        return text
    # tuples of floats, written comma-separated
    if "tuple" in str(annotation):
        try:
            return tuple(float(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{name}: expected comma-separated numbers") from None
    raise ConfigError(f"{name}: unsupported field type {annotation!r}")


def from_mapping(cls, mapping: dict[str, str], section: str = ""):
    """Build dataclass ``cls`` from string values; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(mapping) - fields)
    if unknown:
        where = f"[{section}] " if section else ""
        raise ConfigError(f"{where}unknown key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(f"{section}.{k}" if section else k, v, hints[k])
              for k, v in mapping.items()}
    return cls(**kwargs)


def read_sections(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {name: dict(parser[name]) for name in parser.sections()}


def to_lines(obj, section: str) -> list[str]:
    lines = [f"[{section}]"]
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return lines
