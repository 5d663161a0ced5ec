"""Flat ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are parsed according
to the target dataclass field type; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from pathlib import Path

from ..scene import ConfigError, SystemConfig

SEED_ENV = "ISACLAB_SEED"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _convert(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, *_) = typing.get_args(tp)
        return tuple(_convert(v.strip(), inner, key) for v in value.split(",") if v.strip())
    if tp is bool:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        if tp is int:
            return int(value, 0)
        if tp is float:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return value


def build(cls, pairs: dict[str, str], **overrides):
    """Instantiate dataclass ``cls`` from string pairs, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(pairs) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _convert(v, hints[k], k) for k, v in pairs.items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def load(cls, path: str | Path | None, **overrides):
    pairs = parse_pairs(Path(path).read_text(), str(path)) if path else {}
    return build(cls, pairs, **overrides)


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def resolve_seed(cli_seed: int | None, file_seed: int) -> int:
    """CLI flag, then the ISACLAB_SEED environment variable, then the file."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} is not an integer: {env!r}") from None
    return int(file_seed)


def load_system(path, seed: int | None = None) -> SystemConfig:
    cfg = load(SystemConfig, path)
    return cfg.replace(seed=resolve_seed(seed, cfg.seed))
