"""Configuration: environment defaults and key=value run-config files."""

import dataclasses
import os
import typing
from typing import Any, Dict, Optional

from dotenv import dotenv_values, load_dotenv

# Load environment variables
load_dotenv()

# Output and execution defaults
RAN_OUTPUT_DIR = os.getenv("RAN_OUTPUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("RAN_SEED", "0"))
DEFAULT_THREADS = int(os.getenv("RAN_THREADS", "1"))
VERBOSE = os.getenv("RAN_VERBOSE", "1").strip().lower() not in ("0", "false", "no", "off")

RESOLVED_CONFIG_NAME = "resolved_config.txt"


class ConfigError(ValueError):
    """Unknown key or a value that does not parse as its declared type."""


def read_config_file(path: str) -> Dict[str, str]:
    """Parse a KEY=value file (dotenv grammar); keys come back lower-cased."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    values = dotenv_values(path)
    parsed = {}
    for key, value in values.items():
        if value is None:
            raise ConfigError(f"{path}: key {key!r} has no value")
        parsed[key.strip().lower()] = value.strip()
    return parsed


def _strip_optional(kind):
    if typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return kind, False


def coerce(key: str, value: Any, kind) -> Any:
    """Convert a config-file string to the annotated field type."""
    kind, optional = _strip_optional(kind)
    if not isinstance(value, str):
        return value
    text = value.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        origin = typing.get_origin(kind)
        if origin in (tuple, list):
            args = typing.get_args(kind)
            item_kind = args[0] if args else str
            items = [coerce(key, part, item_kind) for part in text.split(",") if part.strip()]
            return tuple(items) if origin is tuple else items
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}")


def field_types(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def build_dataclass(cls, values: Dict[str, Any], prefix: str = ""):
    """Instantiate cls from the `prefix`-ed entries of values, coercing strings."""
    types = field_types(cls)
    kwargs = {}
    for key, value in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name in types:
            kwargs[name] = coerce(key, value, types[name])
    return cls(**kwargs)


def check_known_keys(values: Dict[str, Any], known) -> None:
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(path: str, values: Dict[str, Any], header: Optional[str] = None):
    """Write values in the same grammar read_config_file accepts, keys sorted."""
    with open(path, "w") as f:
        if header:
            f.write(f"# {header}\n")
        for key in sorted(values):
            f.write(f"{key}={format_value(values[key])}\n")
