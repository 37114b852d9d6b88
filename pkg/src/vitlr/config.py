"""Flat ``key=value`` config files mapped onto dataclasses.

Blank lines and ``#`` comments are ignored. Tuple fields are written as
comma-separated lists. Unknown keys are errors so typos surface early.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(), str(p))


def _convert(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, *_) = typing.get_args(tp)
        parts = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(_convert(v, inner, key) for v in parts)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _convert(value, args[0], key)
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        return tp(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None


def from_kv(cls: type[T], values: dict[str, Any], base: T | None = None) -> T:
    """Build ``cls`` from string values, starting from ``base`` or defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = _convert(value, hints[key], key) if isinstance(value, str) else value
    obj = dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    return obj


def load(cls: type[T], path, base: T | None = None) -> T:
    return from_kv(cls, read_kv(path), base)


def to_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def save(obj, path) -> None:
    Path(path).write_text(to_kv(obj))
