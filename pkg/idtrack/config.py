"""
id: config
tag: ambient

Defaults, numerical tolerances and config-file loading for idtrack.
Config files are TOML; see configs/ for annotated examples.
"""

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import toml

# Output directory for CSV files and metadata sidecars
OUT_DIR = Path(os.environ.get("IDTRACK_OUT_DIR", "results"))

# Relative symmetry tolerance for moment-form covariances
SYMMETRY_TOL = 1e-12

# Eigenvalue floor, relative to the spectral norm
EIGEN_TOL = 1e-10

# Conditional variances below this fraction of trace/n are clamped to zero
VARIANCE_CLAMP = 1e-12

# Residual components in deterministic directions below this are on-support
SUPPORT_TOL = 1e-9

# Classical update gives up above this pivot-ratio condition estimate
CONDITION_LIMIT = 1e14

# Measurement-noise floor (m^2) the classical filter uses when R is exactly zero
EPSILON_R = 1e-9

# Log-likelihoods below this are treated as underflowed
LOG_UNDERFLOW = -700.0


class IdtrackError(Exception):
    """Root of every error raised by idtrack."""


class ConfigError(IdtrackError):
    """A config file or mapping does not match the schema."""


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by the algebra and the filters."""

    symmetry: float = SYMMETRY_TOL
    eigen: float = EIGEN_TOL
    variance_clamp: float = VARIANCE_CLAMP
    support: float = SUPPORT_TOL
    condition_limit: float = CONDITION_LIMIT
    epsilon_r: float = EPSILON_R


DEFAULT_TOLERANCES = Tolerances()


def resolve_tolerances(tol: Optional[Tolerances]) -> Tolerances:
    return DEFAULT_TOLERANCES if tol is None else tol


def load_config(path) -> Dict[str, Any]:
    """
    Load a TOML config file.

    Args:
        path: Path to the file

    Returns:
        dict: Parsed tables

    Raises:
        ConfigError: If the file is missing or not valid TOML
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file '{path}' not found")
    try:
        return toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"Failed to parse '{path}': {e}") from e


def dataclass_from_mapping(cls, mapping: Mapping[str, Any], base=None, converters=None):
    """
    Build (or update) a dataclass instance from a config table.

    Unknown keys are rejected so typos in config files fail loudly.
    `converters` maps field names to callables applied to the raw value.
    """
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"Unknown keys for {cls.__name__}: {', '.join(unknown)}")

    converters = converters or {}
    values = {}
    for key, raw in mapping.items():
        try:
            values[key] = converters[key](raw) if key in converters else raw
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Bad value for {cls.__name__}.{key}: {raw!r} ({e})") from e

    try:
        return replace(base, **values) if base is not None else cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def tolerances_from_mapping(mapping: Mapping[str, Any]) -> Tolerances:
    return dataclass_from_mapping(
        Tolerances, mapping, converters={f.name: float for f in fields(Tolerances)}
    )
