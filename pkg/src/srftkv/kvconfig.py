"""Flat ``key = value`` config files (``#`` comments allowed)."""

from __future__ import annotations

import configparser

from .errors import ConfigError

_SECTION = "root"


def read_kv(path):
    """Parse a key-value file into a ``dict[str, str]``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), delimiters=("=", ":"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_string(f"[{_SECTION}]\n" + fh.read(), source=str(path))
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return dict(parser[_SECTION])


def parse_int(values, key, default=None):
    if key not in values:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    try:
        return int(values[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {values[key]!r}") from None


def parse_float(values, key, default=None):
    if key not in values:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {values[key]!r}") from None
