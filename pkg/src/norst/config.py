"""Flat sectioned ``key = value`` experiment configuration.

::

    # comments start with '#'
    [scene]
    n = 200
    change_times = 600, 1600

Sections map onto dataclasses; unknown sections or keys are errors, and every
error carries the file line it came from. Values are coerced to the type of
the target field's default: tuples are comma separated, booleans are
``true``/``false``.
"""
from __future__ import annotations

import dataclasses
import re

_SECTION = re.compile(r"^\[([A-Za-z_][\w-]*)\]$")
_KEYVAL = re.compile(r"^([A-Za-z_][\w]*)\s*=\s*(.*)$")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based, or ``None`` for whole-file issues."""

    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclasses.dataclass
class RawEntry:
    value: str
    line: int


def parse_text(text, source="<config>"):
    """Parse into ``{section: {key: RawEntry}}`` without interpreting values."""
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section in out:
                raise ConfigError(f"duplicate section [{section}]", lineno, source)
            out[section] = {}
            continue
        m = _KEYVAL.match(line)
        if not m:
            raise ConfigError(f"cannot parse line {raw.strip()!r}; expected 'key = value'", lineno, source)
        if section is None:
            raise ConfigError(f"key {m.group(1)!r} appears before any [section]", lineno, source)
        key, val = m.group(1), m.group(2).strip()
        if key in out[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, source)
        out[section][key] = RawEntry(val, lineno)
    return out


def _scalar(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def coerce(text, default):
    """Convert ``text`` to the type of ``default`` (``None`` means infer)."""
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (tuple, list)):
        if not text:
            return ()
        return tuple(_scalar(p.strip()) for p in text.split(","))
    if isinstance(default, str):
        return text
    if text.lower() in ("none", ""):
        return None
    return _scalar(text)


def field_defaults(cls):
    """``{name: default}`` for a dataclass, ``MISSING`` for required fields."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = dataclasses.MISSING
    return out


def bind_section(entries, defaults, section, source, required=(), exclude=()):
    """Coerce the raw entries of one section against ``defaults``.

    Returns a dict of the keys that were present. Missing ``required`` keys
    and unknown keys raise :class:`ConfigError`.
    """
    values = {}
    for key, ent in entries.items():
        if key not in defaults or key in exclude:
            raise ConfigError(f"unknown key {key!r} in [{section}]", ent.line, source)
        try:
            values[key] = coerce(ent.value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", ent.line, source) from None
    for key in required:
        if key not in values:
            raise ConfigError(f"missing required field {section}.{key}", None, source)
    return values
