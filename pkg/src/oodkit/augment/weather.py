"""Rule-based weather corruptions: rain, snow, fog and sunshine.

Each recipe is a severity-indexed table plus a small renderer.  Every
corruption is written as ``in + a * (target - in)`` with ``target`` brighter
than or equal to the input, so outputs stay in [0, 1] and, for snow, fog and
sunshine, never darken a pixel.
"""
from dataclasses import dataclass
from enum import Enum
import math

import numpy as np
from scipy import ndimage
from skimage.draw import line_aa

from ..errors import ContractViolation
from ..imaging import check_image, clamp


class Weather(str, Enum):
    RAIN = "rain"
    SNOW = "snow"
    FOG = "fog"
    SUNSHINE = "sunshine"


@dataclass(frozen=True)
class WeatherKind:
    kind: Weather
    severity: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", Weather(self.kind))
        if not 1 <= int(self.severity) <= 5:
            raise ContractViolation(f"severity {self.severity} outside [1, 5]")


# Per-severity tables, index = severity - 1.
RAIN_STREAKS_PER_KPX = (6, 9, 13, 18, 24)
RAIN_LENGTH = (0.12, 0.16, 0.2, 0.24, 0.28)  # fraction of the image side
RAIN_OPACITY = (0.3, 0.4, 0.5, 0.6, 0.7)
SNOW_DENSITY = (0.02, 0.035, 0.05, 0.065, 0.08)
SNOW_BLUR = (2, 3, 4, 5, 6)
SNOW_WHITEN = (0.1, 0.15, 0.2, 0.3, 0.4)
FOG_WEIGHT = (0.3, 0.4, 0.5, 0.6, 0.7)
FOG_DECAY = (3.0, 2.6, 2.2, 1.9, 1.6)
SUN_GAIN = (1.1, 1.2, 1.3, 1.4, 1.5)
SUN_GLARE = (0.3, 0.4, 0.5, 0.6, 0.7)
SUN_SIGMA = (0.25, 0.3, 0.35, 0.4, 0.45)  # fraction of the image side


def plasma_fractal(size, decay, rng):
    """Diamond-square height map of shape (size, size) scaled to [0, 1].

    ``size`` must be a power of two.
    """
    if size & (size - 1):
        raise ContractViolation(f"plasma size must be a power of two, got {size}")
    grid = np.zeros((size, size))
    step = size
    wibble = 100.0
    grid[0, 0] = 0.0

    def jitter(arr):
        return arr + rng.uniform(-wibble, wibble, arr.shape)

    while step >= 2:
        half = step // 2
        # squares: centres from the average of the four corners
        corners = grid[0:size:step, 0:size:step]
        avg = (corners + np.roll(corners, -1, axis=0)
               + np.roll(corners, -1, axis=1) + np.roll(np.roll(corners, -1, axis=0), -1, axis=1)) / 4.0
        grid[half:size:step, half:size:step] = jitter(avg)
        # diamonds: edge midpoints from their four neighbours
        corners = grid[0:size:step, 0:size:step]
        centres = grid[half:size:step, half:size:step]
        ltsum = corners + np.roll(corners, -1, axis=0) + centres + np.roll(centres, 1, axis=1)
        grid[half:size:step, 0:size:step] = jitter(ltsum / 4.0)
        ttsum = corners + np.roll(corners, -1, axis=1) + centres + np.roll(centres, 1, axis=0)
        grid[0:size:step, half:size:step] = jitter(ttsum / 4.0)
        step = half
        wibble /= decay
    grid -= grid.min()
    top = grid.max()
    return grid / top if top > 0 else grid


def _haze(h, w, decay, rng):
    size = 1 << (max(h, w) - 1).bit_length()
    return plasma_fractal(size, decay, rng)[:h, :w]


def rain(img, severity, rng):
    h, w = img.shape[:2]
    i = severity - 1
    layer = np.zeros((h, w))
    count = max(1, round(RAIN_STREAKS_PER_KPX[i] * h * w / 1000.0))
    length = RAIN_LENGTH[i] * max(h, w)
    angle = rng.uniform(math.radians(10), math.radians(30)) * rng.choice((-1.0, 1.0))
    dx, dy = length * math.sin(angle), length * math.cos(angle)
    for _ in range(count):
        r0, c0 = rng.uniform(-dy, h), rng.uniform(-abs(dx), w + abs(dx))
        rr, cc, val = line_aa(int(r0), int(c0), int(r0 + dy), int(c0 + dx))
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        np.maximum.at(layer, (rr[keep], cc[keep]), val[keep])
    a = (RAIN_OPACITY[i] * layer)[..., None]
    return clamp(img + a * (1.0 - img))


def snow(img, severity, rng):
    h, w = img.shape[:2]
    i = severity - 1
    flecks = (rng.random((h, w)) < SNOW_DENSITY[i]) * rng.uniform(0.6, 1.0, (h, w))
    n = SNOW_BLUR[i]
    kernel = np.zeros((2 * n + 1, 2 * n + 1))
    angle = rng.uniform(-math.pi / 4, math.pi / 4)
    rr, cc, val = line_aa(n, n, n + round(n * math.cos(angle)), n + round(n * math.sin(angle)))
    kernel[rr, cc] = val
    kernel /= kernel.sum()
    streaks = np.clip(ndimage.convolve(flecks, kernel, mode="constant") * 2.0, 0.0, 1.0)
    whitened = img + SNOW_WHITEN[i] * (1.0 - img)
    return clamp(whitened + streaks[..., None] * (1.0 - whitened))


def fog(img, severity, rng):
    h, w = img.shape[:2]
    haze = _haze(h, w, FOG_DECAY[severity - 1], rng)
    a = (FOG_WEIGHT[severity - 1] * haze)[..., None]
    return clamp(img + a * (1.0 - img))


def sunshine_center(rng, h, w):
    """Integer glare centre drawn from the upper third of the frame."""
    return int(rng.integers(0, max(1, h // 3))), int(rng.integers(0, w))


def glare_profile(h, w, center, severity):
    """Closed-form radial glare: amplitude * exp(-r^2 / (2 sigma^2))."""
    i = severity - 1
    sigma = SUN_SIGMA[i] * max(h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    r2 = (ys - center[0]) ** 2 + (xs - center[1]) ** 2
    return SUN_GLARE[i] * np.exp(-r2 / (2.0 * sigma * sigma))


def sunshine(img, severity, rng):
    h, w = img.shape[:2]
    glare = glare_profile(h, w, sunshine_center(rng, h, w), severity)
    return clamp(SUN_GAIN[severity - 1] * img + glare[..., None])


_RENDERERS = {Weather.RAIN: rain, Weather.SNOW: snow, Weather.FOG: fog, Weather.SUNSHINE: sunshine}


def weather(img, kind, rng):
    """Apply one weather corruption described by a :class:`WeatherKind`."""
    img = check_image(img)
    return _RENDERERS[kind.kind](img, int(kind.severity), rng)
