"""Weak and strong augmentation policies.

The strong policy is a RandAugment-style sampler: ``op_count`` operations
drawn uniformly from a fixed pool, each at a strength of ``magnitude / 10``
with a random sign where the op has one.
"""
from dataclasses import dataclass
from enum import Enum
import math

import numpy as np
from scipy import ndimage

from ..errors import ContractViolation
from ..imaging import AffineParams, ColorParams, apply_color, check_image, clamp, resize, warp_affine


class PolicyKind(str, Enum):
    WEAK = "weak"
    STRONG = "strong"


@dataclass(frozen=True)
class AugPolicy:
    kind: PolicyKind = PolicyKind.STRONG
    op_count: int = 2
    magnitude: int = 9
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.op_count < 0:
            raise ContractViolation("op_count must be >= 0")
        if not 0 <= self.magnitude <= 10:
            raise ContractViolation(f"magnitude {self.magnitude} outside [0, 10]")


WEAK_FLIP_PROB = 0.5
WEAK_MIN_CROP = 0.75  # smallest crop side as a fraction of the image side


def weak_draw(rng, h, w):
    """(flip, top, left, crop side) for one weak view."""
    flip = rng.random() < WEAK_FLIP_PROB
    lo = int(math.floor(WEAK_MIN_CROP * min(h, w)))
    side = int(rng.integers(lo, min(h, w) + 1))
    return flip, int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)), side


def weak(img, rng):
    """Random square crop resized back to full size, then a horizontal flip."""
    h, w = img.shape[:2]
    flip, top, left, side = weak_draw(rng, h, w)
    out = img[top:top + side, left:left + side]
    if side != h or side != w:
        out = resize(out, h, w)
    return np.array(out[:, ::-1] if flip else out)


def weak_batch(images, rng):
    """Weak view of every image in an (N, H, W, 3) batch."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = weak(img, rng)
    return out


def _geometric(img, **kw):
    zeros = np.zeros(img.shape[:2])
    return warp_affine(img, zeros, AffineParams(**kw))[0]


def posterize(img, bits):
    shift = 8 - bits
    q = (np.rint(img * 255.0).astype(np.int64) >> shift) << shift
    return q / 255.0


def solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img)


def sharpness(img, factor):
    blurred = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
    return clamp(blurred + factor * (img - blurred))


def equalize(img):
    """Per-channel histogram equalisation on 256 bins."""
    out = np.empty_like(img)
    for c in range(3):
        levels = np.rint(img[..., c] * 255.0).astype(np.int64)
        hist = np.bincount(levels.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        lo = cdf[np.nonzero(hist)[0][0]]
        span = cdf[-1] - lo
        if span == 0:
            out[..., c] = img[..., c]
            continue
        lut = (cdf - lo) / span
        out[..., c] = lut[levels]
    return clamp(out)


def _signed(rng, s):
    return s if rng.random() < 0.5 else -s


STRONG_OPS = (
    "rotate", "shear_x", "shear_y", "translate_x", "translate_y", "brightness",
    "contrast", "saturation", "posterize", "solarize", "sharpness", "equalize",
)


def apply_op(img, name, strength, rng):
    """One strong-pool op at ``strength`` in [0, 1]."""
    if name == "rotate":
        return _geometric(img, rotation=_signed(rng, math.radians(30.0) * strength))
    if name == "shear_x":
        return _geometric(img, shear=_signed(rng, 0.3 * strength))
    if name == "shear_y":
        # shear along y = transpose, shear along x, transpose back
        t = np.ascontiguousarray(img.transpose(1, 0, 2))
        return _geometric(t, shear=_signed(rng, 0.3 * strength)).transpose(1, 0, 2).copy()
    if name == "translate_x":
        return _geometric(img, translate_x=_signed(rng, 0.3 * strength))
    if name == "translate_y":
        return _geometric(img, translate_y=_signed(rng, 0.3 * strength))
    if name == "brightness":
        return apply_color(img, ColorParams(brightness_delta=_signed(rng, 0.3 * strength)))
    if name == "contrast":
        return apply_color(img, ColorParams(contrast_gain=max(0.1, 1.0 + _signed(rng, 0.7 * strength))))
    if name == "saturation":
        return apply_color(img, ColorParams(saturation_gain=max(0.1, 1.0 + _signed(rng, 0.9 * strength))))
    if name == "posterize":
        return posterize(img, 8 - int(round(6 * strength)))
    if name == "solarize":
        return solarize(img, 1.0 - strength)
    if name == "sharpness":
        return sharpness(img, 1.0 + _signed(rng, 0.9 * strength))
    if name == "equalize":
        return equalize(img)
    raise ContractViolation(f"unknown op {name!r}")


def strong(img, op_count, magnitude, rng):
    strength = magnitude / 10.0
    out = img
    for k in rng.integers(0, len(STRONG_OPS), size=op_count):
        out = apply_op(out, STRONG_OPS[k], strength, rng)
    return np.array(out)


def apply_policy(img, policy, rng=None):
    """Augment one image; ``rng`` defaults to a generator seeded by the policy."""
    img = check_image(img)
    if rng is None:
        rng = np.random.default_rng(policy.rng_seed)
    if policy.kind is PolicyKind.WEAK:
        return weak(img, rng)
    return strong(img, policy.op_count, policy.magnitude, rng)


def strong_batch(images, policy, rng):
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = strong(img, policy.op_count, policy.magnitude, rng)
    return out
