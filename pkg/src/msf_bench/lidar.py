"""Point-cloud corruptions: coordinate noise, weather attenuation and point loss.

Inputs are ``(N, 4)`` arrays of ``x, y, z, intensity``; outputs keep the input
dtype, so float32 clouds read from disk stay float32 and float64 clouds keep
full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import LN20, exact_count
from .severity import SeverityTable, default_table


def _table(table: Optional[SeverityTable]) -> SeverityTable:
    return table if table is not None else default_table()


def _clamp_intensity(points: np.ndarray) -> np.ndarray:
    points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)
    return points


def add_gaussian_jitter(points: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    out = np.array(points, copy=True)
    noise = rng.normal(0.0, sigma, size=(len(out), 3))
    out[:, :3] = out[:, :3].astype(np.float64) + noise
    return out


def gaussian_noise_points(points, level: int, rng, table: Optional[SeverityTable] = None) -> np.ndarray:
    """Perturb every coordinate with N(0, sigma) meters; intensity untouched."""
    return add_gaussian_jitter(points, _table(table).value("GN_L", level), rng)


def displace_points(points: np.ndarray, fraction: float, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Move ``floor(fraction * N)`` random points by ``+-delta`` on every axis."""
    out = np.array(points, copy=True)
    k = exact_count(fraction, len(out))
    idx = rng.choice(len(out), size=k, replace=False)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(k, 3))
    out[idx, :3] = out[idx, :3].astype(np.float64) + signs * delta
    return out


def impulse_noise_points(points, level: int, rng, table: Optional[SeverityTable] = None) -> np.ndarray:
    t = _table(table)
    return displace_points(points, t.value("IN_L", level), float(t.option("IN_L", "displacement")), rng)


def drop_points(points: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Remove exactly ``floor(fraction * N)`` points; survivors keep their order."""
    k = exact_count(fraction, len(points))
    keep = np.ones(len(points), dtype=bool)
    keep[rng.choice(len(points), size=k, replace=False)] = False
    return np.array(points[keep], copy=True)


@dataclass
class LidarWeatherParams:
    extinction: float
    scatter_probability: float = 0.3
    intensity_floor: float = 0.05

    def __post_init__(self):
        if not self.extinction >= 0:
            raise ValueError(f"extinction must be non-negative, got {self.extinction}")
        if not 0.0 <= self.scatter_probability <= 1.0:
            raise ValueError(f"scatter_probability must be in [0, 1], got {self.scatter_probability}")

    @classmethod
    def for_fog(cls, visibility: float, table: Optional[SeverityTable] = None) -> "LidarWeatherParams":
        if not visibility > 0:
            raise ValueError(f"visibility must be positive, got {visibility}")
        return cls._with_table(LN20 / visibility, table)

    @classmethod
    def for_rain(cls, rate: float, table: Optional[SeverityTable] = None) -> "LidarWeatherParams":
        opts = _table(table).options["lidar_weather"]
        return cls._with_table(opts["rain_coefficient"] * rate ** opts["rain_exponent"], table)

    @classmethod
    def _with_table(cls, extinction, table):
        opts = _table(table).options["lidar_weather"]
        return cls(extinction, opts["scatter_probability"], opts["intensity_floor"])


def weather_lidar(points: np.ndarray, params: LidarWeatherParams, rng: np.random.Generator) -> np.ndarray:
    """Two-way attenuation with loss of returns that fall below the detection floor.

    Intensity becomes ``I * exp(-2 * alpha * r)``. A return whose intensity
    drops from at or above ``intensity_floor`` to below it is lost: with
    ``scatter_probability`` it is replaced by a weak droplet echo at ``u * r``
    on the same ray (``u ~ U[0.05, 1)``, intensity ``~ U[0, 0.1]`` capped at
    the original), otherwise it disappears. Returns already below the floor were detectable in clear
    air and only lose intensity.
    """
    out = np.array(points, copy=True)
    if params.extinction == 0 or len(out) == 0:
        return out
    xyz = out[:, :3].astype(np.float64)
    rng_m = np.linalg.norm(xyz, axis=1)
    before = out[:, 3].astype(np.float64)
    after = before * np.exp(-2.0 * params.extinction * rng_m)
    lost = (after < params.intensity_floor) & (before >= params.intensity_floor)
    # draws are made for every point so the stream layout does not depend on which points are lost
    scatter_draw = rng.random(len(out))
    u = rng.uniform(0.05, 1.0, len(out))
    echo = rng.uniform(0.0, 0.1, len(out))
    out[:, 3] = after
    scatter = lost & (scatter_draw < params.scatter_probability)
    out[scatter, :3] = xyz[scatter] * u[scatter, None]
    out[scatter, 3] = np.minimum(echo[scatter], before[scatter])
    keep = ~lost | scatter
    return _clamp_intensity(out[keep])


def attenuation_factor(range_m: float, extinction: float) -> float:
    return math.exp(-2.0 * extinction * range_m)
