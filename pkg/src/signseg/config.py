"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored.  Values are parsed as Python
literals when possible (numbers, tuples, booleans) and kept as strings
otherwise.  Tuples may also be written as comma-separated numbers.
"""
from __future__ import annotations

import ast
import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    """Bad or missing config key; ``key`` names the culprit."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if "," in text:
        try:
            return tuple(ast.literal_eval(p.strip()) for p in text.split(",") if p.strip())
        except (ValueError, SyntaxError):
            pass
    return text


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key)
        out[key] = _value(val)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(), str(path))


def format_config(values: dict) -> str:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (tuple, list)):
            v = ", ".join(repr(x) for x in v) + ("," if len(v) == 1 else "") if v else "()"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def build(cls, values: dict, required=()):
    """Instantiate dataclass ``cls`` from the keys it knows; other keys are ignored."""
    for key in required:
        if key not in values:
            raise ConfigError(f"missing required config key {key!r}", key)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {cls.__name__}: {exc}") from exc


def check_known(values: dict, *classes) -> None:
    known = {f.name for cls in classes for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}", key)
