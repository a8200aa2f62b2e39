"""Run configuration resolution: defaults <- config file <- CLI overrides.

Unknown keys are rejected; every run writes a resolved-config snapshot
next to its outputs so it can be reproduced exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class RunConfig:
    subcommand: str
    values: dict
    out_dir: str
    seed: int = 0
    config_path: str | None = None
    overrides: list[str] = field(default_factory=list)


def _coerce(key: str, raw, default):
    """Coerce an override/file value to the default's type."""
    if default is None or raw is None:
        if isinstance(raw, str):
            return yaml.safe_load(raw)
        return raw
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false", "1", "0"):
            return raw.lower() in ("true", "1")
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            as_float = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}")
        if as_float != int(as_float):
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}")
        return int(as_float)
    if isinstance(default, float):
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"key {key!r}: expected a float, got {raw!r}")
    if isinstance(default, (tuple, list)):
        if isinstance(raw, str):
            parts = [p for p in raw.split(",") if p != ""]
        elif isinstance(raw, (tuple, list)):
            parts = list(raw)
        else:
            raise ConfigError(f"key {key!r}: expected a sequence, got {raw!r}")
        elem = default[0] if len(default) else 0.0
        return tuple(_coerce(key, p, elem) for p in parts)
    if isinstance(default, str):
        return str(raw)
    return raw


def resolve_config(defaults: dict, config_file: str | Path | None, overrides: list[str] | None) -> dict:
    """Layer a YAML file and key=value overrides over defaults.

    Later layers win; keys absent from `defaults` raise ConfigError naming
    the key, as do values that cannot be coerced to the default's type.
    """
    resolved = dict(defaults)
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        for key, value in data.items():
            if key not in resolved:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            resolved[key] = _coerce(key, value, defaults[key])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in resolved:
            raise ConfigError(f"unknown override key {key!r}")
        resolved[key] = _coerce(key, value.strip(), defaults[key])
    return resolved


def write_snapshot(values: dict, out_dir: str | Path, name: str = "resolved_config.yaml") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = out_dir / name
    with open(snapshot, "w") as fh:
        yaml.safe_dump(_plain(values), fh, sort_keys=True)
    return snapshot


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value
