"""Pixel-level primitives.

Images are float64 arrays of shape (H, W, 3) with intensities in [0, 1];
masks are float64 arrays of shape (H, W) with weights in [0, 1].  Every
public function returns a new array and never writes to its inputs.
"""
from dataclasses import dataclass
import math

import numpy as np
from PIL import Image as PILImage

from .errors import ContractViolation

MIN_SIDE = 8


def check_image(img, name="img"):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ContractViolation(f"{name} sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    return img


def check_mask(mask, shape=None, name="mask"):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got {mask.shape}")
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise ContractViolation(f"{name} shape {mask.shape} does not match image {tuple(shape[:2])}")
    return mask


def clamp(x):
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    scale_x: float = 1.0
    scale_y: float = 1.0
    shear: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    flip_h: bool = False
    flip_v: bool = False

    def __post_init__(self):
        for s in (self.scale_x, self.scale_y):
            if not 0.25 <= s <= 4.0:
                raise ContractViolation(f"scale {s} outside [0.25, 4.0]")
        for t in (self.translate_x, self.translate_y):
            if abs(t) > 1.0:
                raise ContractViolation(f"translation {t} outside [-1, 1]")

    @property
    def is_identity(self):
        return self == AffineParams()


@dataclass(frozen=True)
class ColorParams:
    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    saturation_gain: float = 1.0
    hue_shift: float = 0.0

    def __post_init__(self):
        for g in (self.contrast_gain, self.saturation_gain):
            if not 0.1 <= g <= 10.0:
                raise ContractViolation(f"gain {g} outside [0.1, 10]")


def inverse_affine_matrix(params, height, width):
    """3x3 matrix mapping output (x, y, 1) pixel coordinates to input ones.

    The forward transform about the image centre is
    translate . rotate . shear . scale . flip; the inverse is composed from
    the inverse of each factor so that flips and integer shifts stay exact.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    tx, ty = params.translate_x * width, params.translate_y * height

    def shift(dx, dy):
        return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])

    c, s = math.cos(params.rotation), math.sin(params.rotation)
    rot_inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    shear_inv = np.array([[1.0, -math.tan(params.shear), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale_inv = np.diag([1.0 / params.scale_x, 1.0 / params.scale_y, 1.0])
    flip = np.diag([-1.0 if params.flip_h else 1.0, -1.0 if params.flip_v else 1.0, 1.0])
    return shift(cx, cy) @ flip @ scale_inv @ shear_inv @ rot_inv @ shift(-cx - tx, -cy - ty)


def _bilinear_zero(channels, xs, ys):
    """Sample (H, W, K) ``channels`` at float coordinates, zero outside."""
    h, w = channels.shape[:2]
    # Snap coordinates within rounding noise of a pixel centre.
    rx, ry = np.rint(xs), np.rint(ys)
    xs = np.where(np.abs(xs - rx) < 1e-9, rx, xs)
    ys = np.where(np.abs(ys - ry) < 1e-9, ry, ys)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + (channels.shape[2],))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = channels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(valid[..., None], wx * wy * vals, 0.0)
    return out


def warp_affine(img, mask, params):
    """Warp an image and its mask with one affine map (bilinear, zero fill)."""
    img = check_image(img)
    mask = check_mask(mask, img.shape)
    if params.is_identity:
        return img.copy(), mask.copy()
    h, w = mask.shape
    inv = inverse_affine_matrix(params, h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    stacked = np.concatenate([img, mask[..., None]], axis=2)
    out = clamp(_bilinear_zero(stacked, src_x, src_y))
    return out[..., :3], out[..., 3]


_YIQ = np.array([[0.299, 0.587, 0.114],
                 [0.595716, -0.274453, -0.321263],
                 [0.211456, -0.522591, 0.311135]])
_YIQ_INV = np.linalg.inv(_YIQ)


def apply_color(img, params):
    """Brightness, contrast, saturation, then hue rotation; clamped."""
    out = np.array(img, dtype=np.float64)
    if params.brightness_delta != 0.0:
        out = clamp(out + params.brightness_delta)
    if params.contrast_gain != 1.0:
        mean = out.mean()
        out = clamp(mean + params.contrast_gain * (out - mean))
    if params.saturation_gain != 1.0:
        gray = out.mean(axis=-1, keepdims=True)
        out = clamp(gray + params.saturation_gain * (out - gray))
    if params.hue_shift != 0.0:
        yiq = out @ _YIQ.T
        c, s = math.cos(params.hue_shift), math.sin(params.hue_shift)
        i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
        yiq[..., 1] = c * i - s * q
        yiq[..., 2] = s * i + c * q
        out = clamp(yiq @ _YIQ_INV.T)
    return out


def composite(fg, fg_mask, bg, offset=(0, 0)):
    """Alpha-blend ``fg`` onto ``bg`` with its top-left corner at ``offset``.

    ``offset`` is (row, col) and may push the foreground partly out of frame.
    """
    fg = np.asarray(fg, dtype=np.float64)
    fg_mask = check_mask(fg_mask, fg.shape, "fg_mask")
    out = np.array(bg, dtype=np.float64)
    oy, ox = int(offset[0]), int(offset[1])
    fh, fw = fg_mask.shape
    bh, bw = out.shape[:2]
    y0, y1 = max(oy, 0), min(oy + fh, bh)
    x0, x1 = max(ox, 0), min(ox + fw, bw)
    if y0 >= y1 or x0 >= x1:
        return out
    m = fg_mask[y0 - oy:y1 - oy, x0 - ox:x1 - ox, None]
    f = fg[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    region = out[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = np.where(m > 0, m * f + (1.0 - m) * region, region)
    return out


def _resize_axis(arr, new_len, axis):
    old_len = arr.shape[axis]
    if new_len == old_len:
        return arr
    pos = (np.arange(new_len) + 0.5) * (old_len / new_len) - 0.5
    pos = np.clip(pos, 0.0, old_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, old_len - 1)
    frac = pos - lo
    shape = [1] * arr.ndim
    shape[axis] = new_len
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    return a + frac * (b - a)


def resize(img, new_h, new_w):
    """Bilinear resample with half-pixel centres and edge clamping.

    Accepts a single (H, W, C) image or a batch (N, H, W, C).
    """
    if new_h < MIN_SIDE or new_w < MIN_SIDE:
        raise ContractViolation(f"target size ({new_h}, {new_w}) below {MIN_SIDE}")
    arr = np.asarray(img, dtype=np.float64)
    row_axis = arr.ndim - 3
    out = _resize_axis(arr, new_h, row_axis)
    out = _resize_axis(out, new_w, row_axis + 1)
    return out.copy() if out is arr else out


def resize_mask(mask, new_h, new_w):
    return resize(np.asarray(mask)[..., None], new_h, new_w)[..., 0]


def to_uint8(arr):
    return np.rint(clamp(arr) * 255.0).astype(np.uint8)


def save_png(path, arr):
    """Write an image (H, W, 3) or a mask (H, W) as an 8-bit PNG."""
    data = to_uint8(arr)
    PILImage.fromarray(data, mode="RGB" if data.ndim == 3 else "L").save(path, optimize=False)


def load_png(path, as_mask=False):
    with PILImage.open(path) as im:
        im = im.convert("L" if as_mask else "RGB")
        return np.asarray(im, dtype=np.float64) / 255.0
