"""Mask-level copy-paste and CutMix."""
from dataclasses import dataclass, field
import json
import math
import os

import numpy as np

from ..errors import ConfigError, ContractViolation
from ..imaging import (
    AffineParams, ColorParams, apply_color, check_image, check_mask, composite,
    load_png, resize, save_png, warp_affine,
)


@dataclass(frozen=True)
class BankEntry:
    image: np.ndarray
    mask: np.ndarray
    class_id: int | None = None

    @property
    def task_related(self):
        return self.class_id is not None


@dataclass(frozen=True)
class ObjectBank:
    """Segmented foreground objects, split into task-related and unrelated."""

    entries: tuple = field(default_factory=tuple)
    num_classes: int | None = None

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        for k, e in enumerate(entries):
            img = check_image(e.image, f"entries[{k}].image")
            check_mask(e.mask, img.shape, f"entries[{k}].mask")
            if not e.mask.sum() > 0:
                raise ContractViolation(f"entries[{k}] has an empty mask")
            if e.class_id is not None and self.num_classes is not None:
                if not 0 <= e.class_id < self.num_classes:
                    raise ContractViolation(f"entries[{k}] class {e.class_id} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.entries)

    @property
    def related(self):
        return [e for e in self.entries if e.task_related]

    @property
    def unrelated(self):
        return [e for e in self.entries if not e.task_related]

    def save(self, dir_path):
        os.makedirs(dir_path, exist_ok=True)
        index = []
        for k, e in enumerate(self.entries):
            img_name, mask_name = f"obj_{k:05d}.png", f"obj_{k:05d}_mask.png"
            save_png(os.path.join(dir_path, img_name), e.image)
            save_png(os.path.join(dir_path, mask_name), e.mask)
            index.append({"image": img_name, "mask": mask_name, "class_id": e.class_id,
                          "task_related": e.task_related})
        with open(os.path.join(dir_path, "index.json"), "w") as f:
            json.dump({"num_classes": self.num_classes, "entries": index}, f, indent=1)

    @classmethod
    def load(cls, dir_path):
        with open(os.path.join(dir_path, "index.json")) as f:
            doc = json.load(f)
        entries = []
        for rec in doc["entries"]:
            if rec["task_related"] != (rec["class_id"] is not None):
                raise ConfigError("task_related flag disagrees with class_id", field="entries.task_related")
            entries.append(BankEntry(load_png(os.path.join(dir_path, rec["image"])),
                                     load_png(os.path.join(dir_path, rec["mask"]), as_mask=True),
                                     rec["class_id"]))
        return cls(tuple(entries), doc.get("num_classes"))


def in_frame_weight(mask, offset, out_shape):
    """Total mask weight that lands inside ``out_shape`` at ``offset``."""
    oy, ox = offset
    h, w = mask.shape
    y0, y1 = max(0, -oy), min(h, out_shape[0] - oy)
    x0, x1 = max(0, -ox), min(w, out_shape[1] - ox)
    if y0 >= y1 or x0 >= x1:
        return 0.0
    return float(mask[y0:y1, x0:x1].sum())


def random_offset(mask, out_shape, rng, max_shift=0.25, min_inside=0.5, tries=20):
    """Uniform offset within +-max_shift of the side keeping >= min_inside of the weight."""
    total = mask.sum()
    my, mx = int(max_shift * out_shape[0]), int(max_shift * out_shape[1])
    for _ in range(tries):
        off = (int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1)))
        if total <= 0 or in_frame_weight(mask, off, out_shape) >= min_inside * total:
            return off
    return (0, 0)


def _prepare_object(entry, affine, color, shape):
    img, mask = entry.image, entry.mask
    if img.shape[:2] != tuple(shape[:2]):
        img = resize(img, *shape[:2])
        mask = resize(mask[..., None], *shape[:2])[..., 0]
    img, mask = warp_affine(img, mask, affine)
    return apply_color(img, color), mask


def copy_paste_context(bg_pool, obj, affine, color, rng, offset=None, max_shift=0.25):
    """Paste a task-related object onto a task-unrelated background.

    Returns ``(image, class_id)``; the label is always the object's class.
    """
    if not bg_pool:
        raise ConfigError("background pool is empty", field="augment.backgrounds")
    if not obj.task_related:
        raise ContractViolation("context paste needs a task-related object")
    bg = bg_pool[int(rng.integers(0, len(bg_pool)))]
    shape = obj.image.shape
    if bg.shape != shape:
        bg = resize(bg, *shape[:2])
    fg, mask = _prepare_object(obj, affine, color, shape)
    if offset is None:
        offset = random_offset(mask, shape, rng, max_shift)
    return composite(fg, mask, bg, offset), obj.class_id


def copy_paste_occlusion(base, distractor, affine, color, rng, coverage_cap=0.4, offset=None,
                         max_shift=0.25):
    """Paste a task-unrelated distractor over a labelled image.

    The distractor is shrunk until its in-frame mask weight covers at most
    ``coverage_cap`` of the base image area.  The label is unchanged.
    """
    image, class_id = base
    if distractor.task_related:
        raise ContractViolation("occlusion paste needs a task-unrelated distractor")
    if not 0.0 < coverage_cap <= 0.6:
        raise ContractViolation(f"coverage_cap {coverage_cap} outside (0, 0.6]")
    image = check_image(image)
    area = image.shape[0] * image.shape[1]
    fg, mask = _prepare_object(distractor, affine, color, image.shape)
    if offset is None:
        offset = random_offset(mask, image.shape, rng, max_shift)
    for _ in range(8):
        cover = in_frame_weight(mask, offset, image.shape) / area
        if cover <= coverage_cap:
            break
        shrink = 0.95 * math.sqrt(coverage_cap / cover)
        smaller = AffineParams(
            rotation=affine.rotation, shear=affine.shear, flip_h=affine.flip_h, flip_v=affine.flip_v,
            translate_x=affine.translate_x, translate_y=affine.translate_y,
            scale_x=max(0.25, affine.scale_x * shrink), scale_y=max(0.25, affine.scale_y * shrink))
        affine = smaller
        fg, mask = _prepare_object(distractor, affine, color, image.shape)
    cover = in_frame_weight(mask, offset, image.shape) / area
    if cover > coverage_cap:
        mask = mask * (coverage_cap / cover)
    return composite(fg, mask, image, offset), class_id


@dataclass(frozen=True)
class CutMixParams:
    alpha: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation("cutmix alpha must be > 0")


def cutmix_box(h, w, lam, rng):
    """Rectangle (y0, y1, x0, x1) of nominal area fraction 1 - lam, clipped."""
    cut = math.sqrt(max(0.0, 1.0 - lam))
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    y0, y1 = np.clip([cy - ch // 2, cy - ch // 2 + ch], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx - cw // 2 + cw], 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(a, b, params, rng=None, lam=None):
    """Replace a rectangle of ``a`` with ``b``; labels mix by the true area."""
    img_a, label_a = a
    img_b, label_b = b
    if np.shape(img_a) != np.shape(img_b):
        raise ContractViolation(f"cutmix shape mismatch {np.shape(img_a)} vs {np.shape(img_b)}")
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    if lam is None:
        lam = float(rng.beta(params.alpha, params.alpha))
    h, w = np.shape(img_a)[:2]
    y0, y1, x0, x1 = cutmix_box(h, w, lam, rng)
    out = np.array(img_a, dtype=np.float64)
    out[y0:y1, x0:x1] = img_b[y0:y1, x0:x1]
    lam_area = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    label_a = np.asarray(label_a, dtype=np.float64)
    label_b = np.asarray(label_b, dtype=np.float64)
    if np.array_equal(label_a, label_b):
        return out, label_a.copy()
    label = lam_area * label_a + (1.0 - lam_area) * label_b
    return out, label
