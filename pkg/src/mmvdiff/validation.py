"""Type checks for config dataclasses read from user files."""

from __future__ import annotations

from dataclasses import fields

from .errors import ConfigError

_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def check_scalar_fields(obj) -> None:
    """Reject wrongly typed scalar fields of a config dataclass; ints are widened where floats are due."""
    for f in fields(obj):
        kind = _SCALARS.get(f.type)
        if kind is None:
            continue
        value = getattr(obj, f.name)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            setattr(obj, f.name, float(value))
        elif not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ConfigError(f"{type(obj).__name__}.{f.name} must be {f.type}, got {value!r}")
