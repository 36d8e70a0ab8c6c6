"""Shared constants, small value helpers and exception types."""

from __future__ import annotations

import enum

import numpy as np

#: Propagation speed used throughout the model [m/s].  Rounded to 3e8 so that
#: delay and Doppler figures come out as the usual textbook numbers.
SPEED_OF_LIGHT = 3.0e8

#: Large-scale parameters, in the row/column order of every cross-correlation
#: matrix and every raw-normal vector.
LSP_NAMES = ("DS", "K", "ASD", "ASA", "SF")

#: Angle spreads are capped here (degrees) before cluster angles are drawn.
ANGLE_SPREAD_CAP_DEG = 104.0

#: Environment classes understood by the geometry layer.
ENVIRONMENT_CLASSES = ("dense_urban", "urban", "suburban", "rural", "highway")


class Condition(str, enum.Enum):
    LOS = "LOS"
    NLOS = "nLOS"


class HcmError(Exception):
    """Base class of all errors raised by this package."""


class ConfigError(HcmError, ValueError):
    """Invalid configuration or scenario document.

    ``field`` names the offending key (dotted path) when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class GeometryError(HcmError):
    pass


class QueryError(HcmError):
    pass


class ContractError(HcmError):
    pass


def vec3(x, y=None, z=None) -> np.ndarray:
    """Build a finite float64 position ``(x, y, z)`` in meters (local ENU)."""
    if y is None:
        arr = np.asarray(x, dtype=float).reshape(-1)
        if arr.size == 2:
            arr = np.append(arr, 0.0)
    else:
        arr = np.array([x, y, 0.0 if z is None else z], dtype=float)
    if arr.shape != (3,):
        raise ValueError(f"expected 3 components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("position components must be finite")
    return arr


def azimuth_deg(v: np.ndarray) -> np.ndarray:
    """Azimuth of the horizontal projection of ``v`` in degrees (-180, 180]."""
    v = np.asarray(v, dtype=float)
    return np.degrees(np.arctan2(v[..., 1], v[..., 0]))


def wrap_deg(a):
    """Wrap angles to [-180, 180)."""
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))
