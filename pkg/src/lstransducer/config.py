"""Flat ``key = value`` config files mapped onto dataclass configs."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_config_file(path) -> dict[str, str]:
    """One ``key = value`` per line; ``#`` starts a comment; dashes in keys become underscores."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def coerce(value: str, kind) -> object:
    if kind is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, float, str):
        try:
            return kind(value)
        except ValueError:
            raise ConfigError(f"expected {kind.__name__}, got {value!r}") from None
    # tuples of strings (freeze lists) stay comma strings; the dataclass splits them
    return value


def build(cls, values: dict[str, str], skip: typing.Iterable[str] = (), **fixed):
    """Instantiate ``cls`` from string ``values``; keys it lacks are ignored."""
    types = _field_types(cls)
    kwargs = dict(fixed)
    for name, kind in types.items():
        if name in values and name not in skip and name not in fixed:
            kwargs[name] = coerce(values[name], kind)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from None


def field_names(*classes, skip: typing.Iterable[str] = ()) -> list[str]:
    skip = set(skip)
    seen: dict[str, None] = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            if f.name not in skip:
                seen[f.name] = None
    return list(seen)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def format_resolved(sections: dict[str, dict]) -> str:
    """Deterministic dump: one ``[section]`` header then sorted ``key = value`` lines."""
    lines = []
    for name in sorted(sections):
        lines.append(f"[{name}]")
        for k in sorted(sections[name]):
            lines.append(f"{k} = {_fmt(sections[name][k])}")
    return "\n".join(lines) + "\n"
