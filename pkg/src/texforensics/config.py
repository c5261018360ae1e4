"""Flat ``key = value`` experiment files and layered overrides.

Precedence is defaults < config file < command-line overrides. Unknown
keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .detector import FLAT_TYPES, DetectorConfig, config_from_flat, config_to_flat


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str | None = None
    overrides: tuple[str, ...] = ()
    seed: int | None = None


def _coerce(key: str, raw: str):
    if key not in FLAT_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = FLAT_TYPES[key]
    try:
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_assignment(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line)
        try:
            flat[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return flat


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: DetectorConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_to_flat(cfg).items())


def resolve_config(config_path=None, overrides=(), seed: int | None = None, workers: int | None = None,
                   base: DetectorConfig | None = None) -> DetectorConfig:
    flat = config_to_flat(base or DetectorConfig())
    if config_path:
        flat.update(load_config_file(config_path))
    for item in overrides:
        key, value = parse_assignment(item)
        flat[key] = _coerce(key, value)
    if seed is not None:
        flat["seed"] = seed
    if workers is not None:
        flat["workers"] = workers
    try:
        return config_from_flat(flat)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
