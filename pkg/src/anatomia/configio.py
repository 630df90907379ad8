"""Layered key-value config files (JSON or YAML) with dotted-path overrides.

A file may name other files under ``include``; included layers are merged
first (depth-first, later layers win), then the file's own keys, then any
``--set key=value`` overrides. Every run writes its fully resolved config
next to its outputs.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import ConfigError


def _parse_file(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"malformed config {path}{where}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed config {path} at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return data


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path) -> dict:
    """Load one config file, resolving its include chain."""
    path = Path(path)
    raw = _parse_file(path)
    includes = raw.pop("include", [])
    if isinstance(includes, (str, Path)):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        inc_path = Path(inc)
        if not inc_path.is_absolute():
            inc_path = path.parent / inc_path
        merged = _deep_merge(merged, load_config(inc_path))
    return _deep_merge(merged, raw)


def parse_override(item: str) -> tuple[str, Any]:
    """'a.b.c=value' -> ('a.b.c', parsed value); values parse as JSON when
    possible, else stay strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def set_by_path(cfg: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def apply_overrides(cfg: dict, sets: Sequence[str]) -> dict:
    out = json.loads(json.dumps(cfg))  # deep copy, JSON-safe by construction
    for item in sets:
        key, value = parse_override(item)
        set_by_path(out, key, value)
    return out


def resolve_config(
    path: str | Path | None = None,
    inline: dict | None = None,
    sets: Sequence[str] = (),
) -> dict:
    """Combine a config file (optional), an inline mapping (optional) and
    overrides into one resolved dict."""
    cfg: dict = {}
    if path is not None:
        cfg = _deep_merge(cfg, load_config(path))
    if inline:
        cfg = _deep_merge(cfg, inline)
    return apply_overrides(cfg, sets)


def write_resolved(cfg: dict, out_path: str | Path) -> None:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
