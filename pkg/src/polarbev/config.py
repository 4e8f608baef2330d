"""Line-oriented ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are parsed against the
type of the dataclass field they set; tuple fields take comma-separated items.
Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = val
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _convert(raw, non_none[0])
    if origin is tuple:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        elem = args[0] if args else str
        return tuple(_convert(s, elem) for s in items)
    if tp is bool:
        return _parse_bool(raw)
    if tp in (int, float, str):
        return tp(raw)
    raise ConfigError(f"unsupported field type {tp}")


def _format(val) -> str:
    if isinstance(val, tuple):
        return ", ".join(_format(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def apply(obj, values: dict[str, str], keymap: dict[str, str] | None = None, source: str = "<config>"):
    """Return a copy of dataclass ``obj`` with ``values`` applied.

    ``keymap`` maps file keys to field names (identity for unlisted fields).
    """
    keymap = keymap or {}
    fields = {f.name: f for f in dataclasses.fields(obj)}
    hints = typing.get_type_hints(type(obj))
    inverse = {v: k for k, v in keymap.items()}
    allowed = {inverse.get(name, name): name for name in fields}
    changes = {}
    for key, raw in values.items():
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key {key!r}")
        name = allowed[key]
        try:
            changes[name] = _convert(raw, hints[name])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    return dataclasses.replace(obj, **changes)


def dump(obj, keymap: dict[str, str] | None = None) -> str:
    """Canonical text: one ``key = value`` line per field in declaration order."""
    keymap = keymap or {}
    inverse = {v: k for k, v in keymap.items()}
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{inverse.get(f.name, f.name)} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def read_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_lines(text, str(path))
