"""Versioned ``key = value`` text configs mapped onto dataclasses."""

from __future__ import annotations

import ast
import dataclasses
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = _parse_value(raw)
    return out


def _coerce(value, default, name):
    if value is None:
        if isinstance(default, str):
            return "none"  # a literal word, not a missing value
        return () if isinstance(default, tuple) else None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple) or default is None:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = (value,)
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(value, tuple):
            return value
        if default is None:
            return value
        raise ConfigError(f"{name}: expected a comma-separated list, got {value!r}")
    if isinstance(default, str):
        return str(value)
    return value


def from_dict(cls, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names) - {"version"}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    version = values.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), k) for k, v in values.items() if k != "version"}
    return dataclasses.replace(defaults, **kwargs)


def load(cls, path):
    return from_dict(cls, parse_text(Path(path).read_text()))


def dump(cfg) -> str:
    lines = [f"version = {CONFIG_VERSION}"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v) + ("," if len(v) == 1 else "")
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
