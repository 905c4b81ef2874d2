"""Severity levels and the physical parameters they map to.

The defaults ship as ``severity.ini`` next to this module. Setting the
``MSF_BENCH_CONFIG`` environment variable to another INI file overrides any
key; sections and keys not present there keep their defaults.
"""

from __future__ import annotations

import configparser
import functools
import hashlib
import numbers
import os
from dataclasses import dataclass
from importlib import resources

CONFIG_ENV = "MSF_BENCH_CONFIG"

PATTERNS = (
    "RN", "FG", "BR", "DK", "DT", "MB", "DB",
    "GN_C", "GN_L", "IN_C", "IN_L", "SM", "TM", "LOSS_C", "LOSS_L",
)  # fmt: skip

# sensor parts each pattern may modify
MODALITIES = {
    "RN": ("image", "velodyne"),
    "FG": ("image", "velodyne"),
    "BR": ("image",),
    "DK": ("image",),
    "DT": ("image",),
    "MB": ("image",),
    "DB": ("image",),
    "GN_C": ("image",),
    "GN_L": ("velodyne",),
    "IN_C": ("image",),
    "IN_L": ("velodyne",),
    "SM": ("calib",),
    "TM": ("image", "velodyne"),
    "LOSS_C": ("image",),
    "LOSS_L": ("velodyne",),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeverityTable:
    levels: dict
    options: dict
    digest: str

    def n_levels(self, pattern: str) -> int:
        return len(self.levels[_check_pattern(pattern)])

    def value(self, pattern: str, severity: int) -> float:
        """Physical parameter of ``pattern`` at 1-based ``severity``."""
        values = self.levels[_check_pattern(pattern)]
        if isinstance(severity, bool) or not isinstance(severity, numbers.Integral) or not 1 <= severity <= len(values):
            raise ValueError(f"severity for {pattern} must be an integer in 1..{len(values)}, got {severity!r}")
        return values[severity - 1]

    def option(self, section: str, key: str):
        return self.options[section][key]


def _check_pattern(pattern: str) -> str:
    if pattern not in PATTERNS:
        raise ValueError(f"unknown corruption pattern {pattern!r}; known patterns: {', '.join(PATTERNS)}")
    return pattern


def _parse_value(text: str):
    parts = [p.strip() for p in text.split(",")]
    try:
        nums = tuple(float(p) for p in parts)
    except ValueError:
        return text.strip()
    return nums if len(nums) > 1 else nums[0]


def _strictly_monotone(values) -> bool:
    diffs = [b - a for a, b in zip(values, values[1:])]
    return all(d > 0 for d in diffs) or all(d < 0 for d in diffs)


def load_severity_table(path=None) -> SeverityTable:
    """Read the default table, then overlay ``path`` or ``$MSF_BENCH_CONFIG`` if set."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    default_text = resources.files(__package__).joinpath("severity.ini").read_text()
    parser.read_string(default_text, source="severity.ini")
    override = path if path is not None else os.environ.get(CONFIG_ENV)
    override_text = ""
    if override:
        try:
            with open(override, encoding="utf-8") as f:
                override_text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read severity config {override}: {e.strerror}") from None
        except UnicodeDecodeError:
            raise ConfigError(f"severity config {override} is not UTF-8 text") from None
        try:
            parser.read_string(override_text, source=str(override))
        except configparser.Error as e:
            raise ConfigError(f"bad severity config {override}: {e}") from None

    levels, options = {}, {}
    for section in parser.sections():
        values = {k: _parse_value(v) for k, v in parser.items(section)}
        if section in PATTERNS:
            lv = values.pop("levels", None)
            lv = (lv,) if isinstance(lv, float) else lv
            if not isinstance(lv, tuple):
                raise ConfigError(f"[{section}] levels must be a comma-separated list of numbers")
            if len(lv) > 1 and not _strictly_monotone(lv):
                raise ConfigError(f"[{section}] levels must be strictly monotone, got {lv}")
            levels[section] = lv
        options[section] = values
    missing = set(PATTERNS) - set(levels)
    if missing:
        raise ConfigError(f"severity config lacks sections {sorted(missing)}")
    digest = hashlib.sha256((default_text + "\0" + override_text).encode()).hexdigest()[:16]
    return SeverityTable(levels, options, digest)


@functools.lru_cache(maxsize=8)
def _cached_table(override):
    return load_severity_table(override or None)


def default_table() -> SeverityTable:
    """The active table: defaults overlaid with ``$MSF_BENCH_CONFIG`` when set."""
    return _cached_table(os.environ.get(CONFIG_ENV, ""))
