"""Image corruptions: weather, exposure, blur, lens distortion, noise and pixel loss.

Every function takes an ``(H, W, 3)`` uint8 RGB image and returns a new one;
the input is never modified. Stochastic functions draw only from the
``numpy.random.Generator`` they are given.

Level-based entry points (``gaussian_noise_image(img, level, rng)``) look the
physical parameter up in the severity table; the functions they wrap take the
parameter directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np
from scipy import ndimage

from .dataset_io import CalibrationSet
from .geometry import project_to_image
from .severity import SeverityTable, default_table

LN20 = math.log(20.0)  # 5% contrast threshold for meteorological visibility


def _table(table: Optional[SeverityTable]) -> SeverityTable:
    return table if table is not None else default_table()


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def exact_count(fraction: float, n: int) -> int:
    """``floor(fraction * n)``, robust to representation error in ``fraction``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    return min(n, int(math.floor(fraction * n + 1e-9)))


# -- exposure -----------------------------------------------------------------


def scale_exposure(img: np.ndarray, gain: float) -> np.ndarray:
    """Multiply pixel values by ``gain`` (no gamma decoding), then clamp."""
    return _to_uint8(img.astype(np.float64) * gain)


def exposure_shift(img: np.ndarray, direction: str, level: int, table: Optional[SeverityTable] = None) -> np.ndarray:
    patterns = {"brighten": "BR", "darken": "DK"}
    if direction not in patterns:
        raise ValueError(f"direction must be 'brighten' or 'darken', got {direction!r}")
    return scale_exposure(img, _table(table).value(patterns[direction], level))


# -- noise --------------------------------------------------------------------


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add per-channel N(0, sigma * 255) noise; ``sigma`` is a fraction of the 8-bit range."""
    noise = rng.normal(0.0, sigma * 255.0, size=img.shape)
    return _to_uint8(img.astype(np.float64) + noise)


def gaussian_noise_image(img, level: int, rng, table: Optional[SeverityTable] = None) -> np.ndarray:
    return add_gaussian_noise(img, _table(table).value("GN_C", level), rng)


def add_impulse_noise(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Set ``floor(fraction * H * W)`` random pixels to black or white with equal odds."""
    h, w = img.shape[:2]
    k = exact_count(fraction, h * w)
    idx = rng.choice(h * w, size=k, replace=False)
    values = rng.integers(0, 2, size=k).astype(np.uint8) * 255
    out = img.copy()
    out.reshape(-1, img.shape[2])[idx] = values[:, None]
    return out


def impulse_noise_image(img, level: int, rng, table: Optional[SeverityTable] = None) -> np.ndarray:
    return add_impulse_noise(img, _table(table).value("IN_C", level), rng)


def drop_pixels(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Black out exactly ``floor(fraction * H * W)`` pixels drawn without replacement from the flattened image."""
    h, w = img.shape[:2]
    k = exact_count(fraction, h * w)
    idx = rng.choice(h * w, size=k, replace=False)
    out = img.copy()
    out.reshape(-1, img.shape[2])[idx] = 0
    return out


# -- blur ---------------------------------------------------------------------


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of ``length`` px at ``angle`` degrees counter-clockwise from horizontal."""
    length = int(length)
    size = length if length % 2 else length + 1
    c = size // 2
    half = (length - 1) / 2.0
    t = np.linspace(-half, half, 16 * length + 1)
    a = math.radians(angle)
    xs = c + t * math.cos(a)
    ys = c - t * math.sin(a)
    kernel = np.zeros((size, size))
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < size) & (yi >= 0) & (yi < size)
        np.add.at(kernel, (yi[ok], xi[ok]), wgt[ok])
    return kernel / kernel.sum()


def disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    kernel = (x * x + y * y <= r * r).astype(np.float64)
    return kernel / kernel.sum()


def convolve_image(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Filter with ``kernel`` using edge replication; returns float64."""
    src = np.asarray(img, dtype=np.float64)
    # correlation == convolution for the point-symmetric kernels used here
    return cv2.filter2D(src, cv2.CV_64F, np.ascontiguousarray(kernel[::-1, ::-1]), borderType=cv2.BORDER_REPLICATE)


def apply_kernel(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _to_uint8(convolve_image(img, kernel))


def motion_blur(img, level: int, table: Optional[SeverityTable] = None) -> np.ndarray:
    t = _table(table)
    return apply_kernel(img, motion_kernel(int(t.value("MB", level)), float(t.option("MB", "angle"))))


def defocus_blur(img, level: int, table: Optional[SeverityTable] = None) -> np.ndarray:
    return apply_kernel(img, disk_kernel(int(_table(table).value("DB", level))))


# -- lens distortion ----------------------------------------------------------


def distortion_source_coords(shape, k1: float, k2: Optional[float] = None):
    """Source ``(rows, cols)`` each output pixel samples from under the radial model.

    ``x_src = x (1 + k1 r^2 + k2 r^4)`` about the image center, with ``r``
    normalized by the half-diagonal.
    """
    if k2 is None:
        k2 = k1 / 3.0
    h, w = shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    norm = math.hypot(cx, cy) or 1.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = (xx - cx) / norm, (yy - cy) / norm
    r2 = dx * dx + dy * dy
    scale = 1.0 + k1 * r2 + k2 * r2 * r2
    return cy + dy * scale * norm, cx + dx * scale * norm


def distort_radial(img: np.ndarray, k1: float, k2: Optional[float] = None) -> np.ndarray:
    rows, cols = distortion_source_coords(img.shape, k1, k2)
    src = img.astype(np.float64)
    out = np.empty_like(src)
    for ch in range(src.shape[2]):
        out[..., ch] = ndimage.map_coordinates(src[..., ch], [rows, cols], order=1, mode="constant", cval=0.0)
    return _to_uint8(out)


def radial_distortion(img, level: int, table: Optional[SeverityTable] = None) -> np.ndarray:
    return distort_radial(img, _table(table).value("DT", level))


# -- weather ------------------------------------------------------------------


@dataclass
class FogParams:
    visibility: float
    atmospheric_light: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if not self.visibility > 0:
            raise ValueError(f"visibility must be positive, got {self.visibility}")

    @property
    def beta(self) -> float:
        return LN20 / self.visibility


@dataclass
class RainParams:
    rate: float
    streak_density: float = 120.0
    streak_length: float = 18.0
    streak_angle: float = 10.0
    streak_alpha: float = 0.35
    veil_coefficient: float = 0.0013
    veil_exponent: float = 0.66
    atmospheric_light: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rain rate must be positive, got {self.rate}")

    def streak_count(self, area_px: int) -> int:
        return int(round(self.streak_density * self.rate * area_px / 1e6))

    @property
    def beta(self) -> float:
        return self.veil_coefficient * self.rate**self.veil_exponent


def fog_params_from_table(visibility: float, table: Optional[SeverityTable] = None) -> FogParams:
    t = _table(table)
    return FogParams(visibility, tuple(t.option("fog", "atmospheric_light")))


def rain_params_from_table(rate: float, table: Optional[SeverityTable] = None) -> RainParams:
    t = _table(table)
    opts = t.options["rain"]
    return RainParams(
        rate,
        streak_density=opts["streak_density"],
        streak_length=opts["streak_length"],
        streak_angle=opts["streak_angle"],
        streak_alpha=opts["streak_alpha"],
        veil_coefficient=opts["veil_coefficient"],
        veil_exponent=opts["veil_exponent"],
        atmospheric_light=tuple(t.option("fog", "atmospheric_light")),
    )


def koschmieder(img: np.ndarray, depth, beta: float, airlight) -> np.ndarray:
    """Blend toward ``airlight`` (RGB in [0, 1]) with transmission ``exp(-beta * depth)``."""
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), img.shape[:2])
    trans = np.exp(-beta * depth)[..., None]
    light = np.asarray(airlight, dtype=np.float64) * 255.0
    return _to_uint8(img.astype(np.float64) * trans + light * (1.0 - trans))


def fog_camera(img: np.ndarray, depth, params: FogParams) -> np.ndarray:
    """Koschmieder fog with ``depth`` (meters, scalar or per-pixel)."""
    return koschmieder(img, depth, params.beta, params.atmospheric_light)


def dense_depth_from_lidar(cloud: np.ndarray, calib: CalibrationSet, shape, fallback: float = 30.0) -> np.ndarray:
    """Per-pixel depth from projected LiDAR, filled from the nearest pixel with a return.

    The nearest return wins where several project onto one pixel. When no
    return lands in the image, every pixel gets ``fallback``.
    """
    h, w = shape[:2]
    depth = np.full((h, w), np.inf)
    if len(cloud):
        uvd = project_to_image(cloud, calib)
        ok = (uvd[:, 0] >= 0) & (uvd[:, 0] < w) & (uvd[:, 1] >= 0) & (uvd[:, 1] < h)
        uvd = uvd[ok]
        np.minimum.at(depth, (uvd[:, 1].astype(np.int64), uvd[:, 0].astype(np.int64)), uvd[:, 2])
    missing = ~np.isfinite(depth)
    if missing.all():
        return np.full((h, w), float(fallback))
    if missing.any():
        _, (iy, ix) = ndimage.distance_transform_edt(missing, return_indices=True)
        depth = depth[iy, ix]
    return depth


def render_streaks(shape, params: RainParams, rng: np.random.Generator) -> np.ndarray:
    """Streak opacity mask in [0, 1]; streak count grows linearly with rain rate."""
    h, w = shape[:2]
    n = params.streak_count(h * w)
    mask = np.zeros((h, w))
    if n == 0:
        return mask
    x0 = rng.uniform(0, w, n)
    y0 = rng.uniform(0, h, n)
    lengths = params.streak_length * rng.uniform(0.7, 1.3, n)
    angles = np.deg2rad(params.streak_angle + rng.normal(0.0, 2.0, n))
    steps = int(math.ceil(params.streak_length * 1.3 * 2)) + 1
    t = np.linspace(0.0, 1.0, steps)[None, :] * lengths[:, None]
    xs = np.floor(x0[:, None] + t * np.sin(angles)[:, None]).astype(np.int64)
    ys = np.floor(y0[:, None] + t * np.cos(angles)[:, None]).astype(np.int64)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    mask[ys[ok], xs[ok]] = 1.0
    return mask


def rain_camera(img: np.ndarray, params: RainParams, rng: np.random.Generator, depth=None, fallback: float = 30.0):
    """Rain as a veil of rate-dependent extinction plus semi-transparent bright streaks."""
    veiled = koschmieder(img, fallback if depth is None else depth, params.beta, params.atmospheric_light)
    mask = render_streaks(img.shape, params, rng)[..., None] * params.streak_alpha
    base = veiled.astype(np.float64)
    return _to_uint8(base + mask * (255.0 - base))
