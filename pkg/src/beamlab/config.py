"""Strict flat-JSON config loading shared by the train and eval configs."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def from_mapping(cls, data: dict, aliases: dict[str, str] | None = None):
    """Build dataclass ``cls`` from ``data``; unknown keys are errors."""
    aliases = aliases or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key == "schema":
            if value != SCHEMA_VERSION:
                raise ConfigError(f"schema: unsupported config schema {value!r} (expected {SCHEMA_VERSION})")
            continue
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"{key}: unknown config field")
        if name in kwargs:
            raise ConfigError(f"{key}: given twice (directly and via an alias)")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_json(path) -> dict:
    """Load a config file; a run manifest yields its embedded resolved config."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "manifest_version" in data:
        data = data["config"]
    return data
