"""Run configuration: a TOML file of sections, validated before any work.

Grammar: ``[section]`` headers followed by ``key = value`` lines (TOML).
Sections and keys are those in :data:`DEFAULTS`; anything else is an error.
Command-line ``--set section.key=value`` overrides are applied after the file.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Sequence

import tomli

DEFAULTS: dict[str, dict] = {
    "encoder": {"L": 2, "H": 4, "d": 64, "d_ff": 256, "max_len": 160, "dropout": 0.1},
    "pretrain": {"rate": 0.15, "epochs": 10, "lr": 2e-3, "warmup": 0.1, "seed": 0, "batch_size": 32, "max_steps": 2000},
    "match": {
        "mode": "ige",
        "M": 3,
        "T": 5,
        "c": 32,
        "epsilon": 0.01,
        "batch": 64,
        "patience": 5,
        "seed": 0,
        "lr": 5e-4,
        "max_epochs": 6,
        "warmup": 0.1,
    },
    "data": {"n_docs": 20000, "seed": 0},
    "serve": {"port": 8080, "top_n_queries": 1000},
}


class ConfigError(ValueError):
    pass


def _check_value(section: str, key: str, value):
    default = DEFAULTS[section][key]
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
    return value


def merge(config: dict, updates: dict, origin: str = "config") -> dict:
    for section, values in updates.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: [{section}] must be a table")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            config[section][key] = _check_value(section, key, value)
    return config


def parse_override(item: str) -> dict:
    """``section.key=value`` with a TOML value; bare words are strings."""
    target, sep, raw = item.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override {item!r} is not section.key=value")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return {section: {key: value}}


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        merge(config, data, str(path))
    for item in overrides:
        merge(config, parse_override(item), "--set")
    return config


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def content_hash(path: str | Path) -> str:
    """Git blob hash of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
