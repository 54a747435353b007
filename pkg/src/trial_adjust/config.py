"""Simulation config documents.

Two formats are accepted. A JSON object, or a flat text file of
``key = value`` lines where ``#`` starts a comment::

    preset = experiment-1
    reps = 2000
    adjusted_counts = 0..6
    kinds = gc-mle, gob-fc-c0

Keys are the fields of :class:`~trial_adjust.simulation.SimConfig`; an
optional ``preset`` key supplies the starting values.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ConfigError
from .simulation import SimConfig, preset

__all__ = ["load_config", "parse_config_text"]

_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_INT_FIELDS = {"n", "q", "n_shifted", "reps", "seed", "threads", "max_iter"}
_FLOAT_FIELDS = {"level", "alpha", "null", "tol"}
_BOOL_FIELDS = {"bias_diagnostic"}
_STR_FIELDS = {"name", "mode"}
_INT_TUPLES = {"adjusted_counts"}
_FLOAT_TUPLES = {"beta_a", "beta_w", "mu_targets"}
_STR_TUPLES = {"kinds", "variance_modes", "tests"}


def _to_int(text):
    val = float(text)
    if val != int(val):
        raise ValueError(f"{text!r} is not an integer")
    return int(val)


def _to_bool(text):
    key = str(text).strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _int_list(text):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(_to_int(lo), _to_int(hi) + 1))
        else:
            out.append(_to_int(part))
    return tuple(out)


def _convert(key, value):
    """Convert a text or JSON value to the type of ``SimConfig.<key>``."""
    if key in _INT_FIELDS:
        return _to_int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    if key in _BOOL_FIELDS:
        return value if isinstance(value, bool) else _to_bool(value)
    if key in _STR_FIELDS:
        return str(value).strip()
    if isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = None
    if key in _INT_TUPLES:
        return tuple(_to_int(v) for v in items) if items is not None else _int_list(value)
    if key in _FLOAT_TUPLES:
        if items is None:
            items = [v for v in str(value).split(",") if v.strip()]
        return tuple(float(v) for v in items)
    if key in _STR_TUPLES:
        if items is None:
            items = str(value).split(",")
        return tuple(str(v).strip() for v in items if str(v).strip())
    raise ValueError(f"no converter for {key!r}")  # pragma: no cover


def _build(entries):
    """``entries``: list of ``(line, key, value)``."""
    base = None
    values = {}
    for line, key, value in entries:
        if key == "preset":
            try:
                base = preset(str(value).strip())
            except ValueError as exc:
                raise ConfigError(str(exc), line=line, field=key) from None
            continue
        if key not in _FIELDS:
            raise ConfigError("unknown field", line=line, field=key)
        try:
            values[key] = (line, _convert(key, value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value: {exc}", line=line, field=key) from None
    base = base or SimConfig(beta_w=(0.0,) * 10)
    if "q" in values and "beta_w" not in values:
        raise ConfigError("changing q requires beta_w", line=values["q"][0], field="q")
    try:
        return dataclasses.replace(base, **{k: v for k, (_, v) in values.items()})
    except (TypeError, ValueError) as exc:
        field = next((k for k in values if k in str(exc)), None)
        line = values[field][0] if field else None
        raise ConfigError(str(exc), line=line, field=field) from None


def parse_config_text(text: str) -> SimConfig:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        if not isinstance(doc, dict):
            raise ConfigError("JSON config must be an object")
        lines = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            for key in doc:
                if f'"{key}"' in raw and key not in lines:
                    lines[key] = lineno
        return _build([(lines.get(k), k, v) for k, v in doc.items()])

    entries = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        if key in seen:
            raise ConfigError("duplicate field", line=lineno, field=key)
        seen.add(key)
        entries.append((lineno, key, value))
    return _build(entries)


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: not UTF-8 text") from None
    return parse_config_text(text)

