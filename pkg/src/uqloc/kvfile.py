"""Plain-text ``key = value`` files shared by scenes, configs and checkpoints.

One key per line. ``#`` starts a comment. Lists are written as
comma-separated values, lists of tuples as ``(a, b), (c, d)``. Nested
fields use dotted keys (``user_grid.rows = 60``).
"""

from __future__ import annotations

import ast
import math
import numbers
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for malformed or incomplete key = value files."""


def parse(text: str, source: str = "<string>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        entries[key] = value
    return entries


def load(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse(text, source=str(path))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ", ".join("(" + format_value(v) + ")" for v in value)
        return ", ".join(format_value(v) for v in value)
    return str(value)


def dump(entries: Mapping[str, Any], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{key} = {format_value(value)}" for key, value in entries.items()]
    return "\n".join(lines) + "\n"


class Section:
    """Typed, key-checked access to a parsed file.

    Every getter raises :class:`ConfigError` naming the offending key.
    """

    _missing = object()

    def __init__(self, entries: Mapping[str, str], source: str = "<config>"):
        self.entries = dict(entries)
        self.source = source

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def _raw(self, key: str, default: Any) -> Any:
        if key in self.entries:
            return self.entries[key]
        if default is self._missing:
            raise ConfigError(f"{self.source}: missing required key '{key}'")
        return default

    def _fail(self, key: str, expected: str) -> ConfigError:
        return ConfigError(
            f"{self.source}: key '{key}' expects {expected}, got {self.entries[key]!r}"
        )

    def text(self, key: str, default: Any = _missing) -> str:
        return self._raw(key, default)

    def number(self, key: str, default: Any = _missing) -> float:
        if key not in self.entries:
            return self._raw(key, default)
        try:
            value = float(self.entries[key])
        except ValueError:
            raise self._fail(key, "a number") from None
        if not math.isfinite(value):
            raise self._fail(key, "a finite number")
        return value

    def optional_number(self, key: str, default: float | None = None) -> float | None:
        if key in self.entries and self.entries[key].lower() in ("none", ""):
            return None
        return self.number(key, default)

    def integer(self, key: str, default: Any = _missing) -> int:
        if key not in self.entries:
            return self._raw(key, default)
        try:
            return int(self.entries[key])
        except ValueError:
            raise self._fail(key, "an integer") from None

    def flag(self, key: str, default: Any = _missing) -> bool:
        if key not in self.entries:
            return self._raw(key, default)
        lowered = self.entries[key].lower()
        if lowered in ("1", "true", "yes"):
            return True
        if lowered in ("0", "false", "no"):
            return False
        raise self._fail(key, "a boolean")

    def _literal(self, key: str) -> Any:
        raw = self.entries[key]
        if raw.lower() in ("", "none"):
            return ()
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            raise self._fail(key, "a comma-separated list") from None
        return value if isinstance(value, tuple) else (value,)

    def numbers(self, key: str, default: Any = _missing, length: int | None = None) -> tuple[float, ...]:
        if key not in self.entries:
            return self._raw(key, default)
        value = self._literal(key)
        if not all(isinstance(v, (int, float)) for v in value):
            raise self._fail(key, "numbers")
        if length is not None and len(value) != length:
            raise self._fail(key, f"{length} numbers")
        return tuple(float(v) for v in value)

    def integers(self, key: str, default: Any = _missing) -> tuple[int, ...]:
        if key not in self.entries:
            return self._raw(key, default)
        value = self._literal(key)
        if not all(isinstance(v, int) for v in value):
            raise self._fail(key, "integers")
        return tuple(value)

    def tuples(self, key: str, width: int, default: Any = _missing) -> list[tuple[float, ...]]:
        """List of fixed-width numeric tuples, e.g. ``(0, 1, 2), (3, 4, 5)``."""
        if key not in self.entries:
            return self._raw(key, default)
        value = self._literal(key)
        if value and not isinstance(value[0], tuple):
            value = (value,)
        out = []
        for item in value:
            if not isinstance(item, tuple) or len(item) != width:
                raise self._fail(key, f"tuples of {width} numbers")
            if not all(isinstance(v, (int, float)) for v in item):
                raise self._fail(key, f"tuples of {width} numbers")
            out.append(tuple(float(v) for v in item))
        return out


def load_section(path: str | Path) -> Section:
    return Section(load(path), source=str(path))
