"""Synthetic shape benchmark with six controlled nuisance shifts.

Every sample is rendered from a :class:`SceneFactors` record drawn from a
per-index seed, so generation order never matters.  An OOD sample starts
from a base-distribution record and perturbs exactly one factor group; at
strength 0 the perturbation is the identity.
"""
from dataclasses import dataclass, field, replace
import colorsys
import json
import math
import os

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as draw_polygon

from .augment.copypaste import BankEntry
from .augment.weather import Weather, WeatherKind, weather
from .errors import ConfigError
from .imaging import clamp, load_png, save_png

SHAPES = ("circle", "square", "triangle", "star", "cross")
NUISANCES = ("shape", "pose", "context", "texture", "occlusion", "weather")
SPLIT_CODES = {"train": 0, "val": 1, "iid": 2, **{n: 3 + k for k, n in enumerate(NUISANCES)},
               "aux_bg": 20, "aux_obj": 21}
TAGS = {"train": "IID", "val": "IID", "iid": "IID", **{n: n.upper() for n in NUISANCES}}
TRAIN_ROTATION = math.radians(20.0)
SUPERSAMPLE = 4


@dataclass(frozen=True)
class BenchSpec:
    num_classes: int = 5
    image_side: int = 32
    train_size: int = 2000
    val_size: int = 500
    test_size_per_split: int = 500
    aux_size: int = 200
    rng_seed: int = 0
    nuisance_strengths: dict = field(default_factory=lambda: {n: 1.0 for n in NUISANCES})

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigError(f"num_classes must be in [2, {len(SHAPES)}], got {self.num_classes}",
                              field="benchmark.num_classes")
        if self.image_side < 16:
            raise ConfigError("image_side must be >= 16", field="benchmark.image_side")
        for name in ("train_size", "val_size", "test_size_per_split", "aux_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", field=f"benchmark.{name}")
        strengths = {n: 1.0 for n in NUISANCES}
        for k, v in dict(self.nuisance_strengths).items():
            if k not in strengths:
                raise ConfigError(f"unknown nuisance {k!r}", field=f"benchmark.nuisance_strengths.{k}")
            if not 0.0 <= float(v) <= 1.0:
                raise ConfigError(f"strength {v} outside [0, 1]", field=f"benchmark.nuisance_strengths.{k}")
            strengths[k] = float(v)
        object.__setattr__(self, "nuisance_strengths", strengths)


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, H, W, 3)
    masks: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,) int
    tags: list
    name: str = ""

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SceneFactors:
    """Everything needed to render one sample.  Groups map to nuisances."""

    label: int
    center: tuple
    radius: float
    geometry: tuple = (1.0, 0.0, 0.0, 0)  # (aspect, stretch angle, vertex jitter, jitter seed)
    pose: float = 0.0  # rotation in radians
    context: tuple = ()  # background recipe
    texture: tuple = ()  # fill recipe
    occlusion: tuple = ()  # occluder recipes
    weather: tuple = ()  # (kind, severity, strength, seed) or empty


def _rng(seed, split, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(SPLIT_CODES[split], index)))


def _random_color(rng, sat=(0.0, 1.0), val=(0.0, 1.0)):
    return colorsys.hsv_to_rgb(rng.random(), rng.uniform(*sat), rng.uniform(*val))


# -- shapes -------------------------------------------------------------------

def shape_vertices(name):
    """Unit-scale polygon (x, y) vertices for one class shape."""
    if name == "circle":
        t = np.linspace(0, 2 * np.pi, 28, endpoint=False)
        return np.stack([np.cos(t), np.sin(t)], 1)
    if name == "square":
        return np.array([[-0.8, -0.8], [0.8, -0.8], [0.8, 0.8], [-0.8, 0.8]])
    if name == "triangle":
        t = np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        return 1.1 * np.stack([np.cos(t), -np.sin(t)], 1) + [0.0, 0.2]
    if name == "star":
        t = -np.pi / 2 + np.arange(10) * np.pi / 5
        r = np.where(np.arange(10) % 2 == 0, 1.15, 0.47)
        return np.stack([r * np.cos(t), r * np.sin(t)], 1)
    if name == "cross":
        a, b = 0.3, 1.0
        return np.array([[-a, -b], [a, -b], [a, -a], [b, -a], [b, a], [a, a], [a, b], [-a, b],
                         [-a, a], [-b, a], [-b, -a], [-a, -a]])
    raise ValueError(name)


def rasterize(verts_xy, side):
    """Anti-aliased coverage mask of a polygon given in pixel coordinates."""
    big = side * SUPERSAMPLE
    pts = (verts_xy + 0.5) * SUPERSAMPLE - 0.5
    rr, cc = draw_polygon(pts[:, 1], pts[:, 0], shape=(big, big))
    hi = np.zeros((big, big))
    hi[rr, cc] = 1.0
    return hi.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE).mean(axis=(1, 3))


def object_polygon(f):
    verts = shape_vertices(SHAPES[f.label]).copy()
    aspect, angle, jitter, jseed = f.geometry
    if jitter > 0:
        jr = np.random.default_rng(jseed)
        verts *= 1.0 + jitter * jr.uniform(-1.0, 1.0, (len(verts), 1))
    if aspect != 1.0:
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        verts = verts @ rot @ np.diag([aspect, 1.0 / math.sqrt(aspect)]) @ rot.T
    c, s = math.cos(f.pose), math.sin(f.pose)
    verts = verts @ np.array([[c, s], [-s, c]])
    return verts * f.radius + [f.center[1], f.center[0]]


# -- backgrounds and fills -----------------------------------------------------

def _coords(side):
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    return ys, xs


def render_pattern(recipe, side):
    """Render a (side, side, 3) texture from a recipe tuple."""
    kind = recipe[0]
    ys, xs = _coords(side)
    if kind == "gradient":
        _, c1, c2, angle, noise, seed = recipe
        t = (xs * math.cos(angle) + ys * math.sin(angle))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        out = np.asarray(c1) + t[..., None] * (np.asarray(c2) - np.asarray(c1))
        return clamp(out + np.random.default_rng(seed).normal(0, noise, out.shape))
    if kind == "solid":
        _, c, noise, seed = recipe
        out = np.broadcast_to(np.asarray(c, dtype=np.float64), (side, side, 3))
        return clamp(out + np.random.default_rng(seed).normal(0, noise, out.shape))
    if kind == "stripes":
        _, c1, c2, period, angle = recipe
        t = xs * math.cos(angle) + ys * math.sin(angle)
        on = (np.floor(t / (period / 2.0)) % 2)[..., None]
        return np.where(on > 0, np.asarray(c1), np.asarray(c2)).astype(np.float64)
    if kind == "checker":
        _, c1, c2, cell = recipe
        on = ((np.floor(xs / cell) + np.floor(ys / cell)) % 2)[..., None]
        return np.where(on > 0, np.asarray(c1), np.asarray(c2)).astype(np.float64)
    if kind == "dots":
        _, c1, c2, period = recipe
        d = np.hypot((xs % period) - period / 2, (ys % period) - period / 2)
        return np.where((d < period / 3.2)[..., None], np.asarray(c1), np.asarray(c2)).astype(np.float64)
    if kind == "smooth_noise":
        _, sigma, seed = recipe
        r = np.random.default_rng(seed)
        field_ = ndimage.gaussian_filter(r.random((side, side, 3)), sigma=(sigma, sigma, 0), mode="wrap")
        lo, hi = field_.min(axis=(0, 1)), field_.max(axis=(0, 1))
        scale = r.uniform(0.4, 1.0, 3)
        offset = r.uniform(0.0, 1.0 - scale)
        return offset + scale * (field_ - lo) / np.maximum(hi - lo, 1e-9)
    if kind == "clutter":
        _, seed = recipe
        r = np.random.default_rng(seed)
        out = np.broadcast_to(np.asarray(_random_color(r)), (side, side, 3)).copy()
        for _ in range(int(r.integers(5, 12))):
            y0, x0 = r.integers(0, side, 2)
            h, w = r.integers(3, side // 2, 2)
            out[y0:y0 + h, x0:x0 + w] = _random_color(r)
        return out
    raise ValueError(kind)


def base_background(rng):
    c1 = _random_color(rng, (0.1, 0.5), (0.15, 0.45))
    c2 = _random_color(rng, (0.1, 0.5), (0.15, 0.45))
    return ("gradient", c1, c2, rng.uniform(0, 2 * np.pi), 0.03, int(rng.integers(2**31)))


def heldout_background(rng, side):
    c1 = _random_color(rng)
    c2 = _random_color(rng)
    kind = ("stripes", "checker")[int(rng.integers(0, 2))]
    if kind == "stripes":
        return ("stripes", c1, c2, rng.uniform(3.0, 7.0) * side / 32, rng.uniform(0, np.pi))
    return ("checker", c1, c2, rng.uniform(2.5, 5.0) * side / 32)


def base_fill(rng):
    return ("solid", _random_color(rng, (0.5, 1.0), (0.7, 1.0)), 0.02, int(rng.integers(2**31)))


def heldout_fill(rng, side):
    c1 = _random_color(rng, (0.5, 1.0), (0.7, 1.0))
    c2 = _random_color(rng)
    kind = ("stripes", "checker", "dots")[int(rng.integers(0, 3))]
    if kind == "stripes":
        return ("stripes", c1, c2, rng.uniform(2.5, 5.0) * side / 32, rng.uniform(0, np.pi))
    if kind == "checker":
        return ("checker", c1, c2, rng.uniform(2.0, 4.0) * side / 32)
    return ("dots", c1, c2, rng.uniform(3.0, 5.0) * side / 32)


def blob_polygon(rng, center, radius, n=9):
    """Star-convex random blob with ``n`` vertices, (x, y) pixel coordinates."""
    t = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = radius * rng.uniform(0.6, 1.0, n)
    return np.stack([center[1] + r * np.cos(t), center[0] + r * np.sin(t)], 1)


# -- factor sampling -----------------------------------------------------------

def sample_base_factors(rng, label, side):
    u = side / 32.0
    return SceneFactors(
        label=int(label),
        center=(side / 2 - 0.5 + rng.uniform(-2, 2) * u, side / 2 - 0.5 + rng.uniform(-2, 2) * u),
        radius=rng.uniform(0.26, 0.32) * side,
        pose=rng.uniform(-TRAIN_ROTATION, TRAIN_ROTATION),
        context=base_background(rng),
        texture=base_fill(rng),
    )


def perturb(f, nuisance, strength, rng, side):
    """Return a copy of ``f`` with exactly one factor group shifted."""
    s = float(strength)
    if s == 0.0:
        return f
    if nuisance == "shape":
        aspect = 1.0 + s * rng.uniform(0.5, 0.9)
        return replace(f, geometry=(aspect, rng.uniform(0, np.pi), s * 0.25, int(rng.integers(2**31))))
    if nuisance == "pose":
        target = rng.choice((-1.0, 1.0)) * rng.uniform(math.radians(30), math.radians(60))
        return replace(f, pose=(1 - s) * f.pose + s * target)
    if nuisance == "context":
        return replace(f, context=("blend", f.context, heldout_background(rng, side), s))
    if nuisance == "texture":
        return replace(f, texture=("blend", f.texture, heldout_fill(rng, side), s))
    if nuisance == "occlusion":
        blobs = []
        n = int(rng.integers(1, 3))
        for _ in range(n):
            ang = rng.uniform(0, 2 * np.pi)
            dist = f.radius * rng.uniform(0.0, 0.7)
            center = (f.center[0] + dist * math.sin(ang), f.center[1] + dist * math.cos(ang))
            rad = f.radius * s * rng.uniform(0.45, 0.65) / math.sqrt(n)
            blobs.append((center, rad, int(rng.integers(2**31)), _random_color(rng)))
        return replace(f, occlusion=tuple(blobs))
    if nuisance == "weather":
        kind = tuple(Weather)[int(rng.integers(0, 4))]
        return replace(f, weather=(kind.value, int(rng.integers(3, 6)), s, int(rng.integers(2**31))))
    raise ValueError(nuisance)


def changed_groups(a, b):
    return {g for g in ("geometry", "pose", "context", "texture", "occlusion", "weather")
            if getattr(a, g) != getattr(b, g)}


GROUP_OF = {"shape": "geometry", "pose": "pose", "context": "context", "texture": "texture",
            "occlusion": "occlusion", "weather": "weather"}


def _render_recipe(recipe, side):
    if recipe[0] == "blend":
        _, base, other, s = recipe
        return (1 - s) * render_pattern(base, side) + s * render_pattern(other, side)
    return render_pattern(recipe, side)


def render(f, side):
    """Render factors to ``(image, mask)``."""
    mask = rasterize(object_polygon(f), side)
    bg = _render_recipe(f.context, side)
    fill = _render_recipe(f.texture, side)
    img = bg + mask[..., None] * (fill - bg)
    for center, rad, seed, color in f.occlusion:
        blob = rasterize(blob_polygon(np.random.default_rng(seed), center, rad), side)
        img = img + blob[..., None] * (np.asarray(color) - img)
    img = clamp(img)
    if f.weather:
        kind, severity, s, seed = f.weather
        corrupted = weather(img, WeatherKind(Weather(kind), severity), np.random.default_rng(seed))
        img = clamp(img + s * (corrupted - img))
    return img, mask


# -- generation ----------------------------------------------------------------

def sample_factors(spec, split, index):
    """Factors for one sample plus its base-distribution counterpart."""
    rng = _rng(spec.rng_seed, split, index)
    label = index % spec.num_classes
    base = sample_base_factors(rng, label, spec.image_side)
    if split in NUISANCES:
        ood = perturb(base, split, spec.nuisance_strengths[split], rng, spec.image_side)
        diff = changed_groups(base, ood)
        assert diff <= {GROUP_OF[split]}, f"{split} sample changed {diff}"
        return ood, base
    return base, base


def generate_split(spec, split, size):
    side = spec.image_side
    images = np.empty((size, side, side, 3))
    masks = np.empty((size, side, side))
    labels = np.empty(size, dtype=np.int64)
    for i in range(size):
        f, _ = sample_factors(spec, split, i)
        images[i], masks[i] = render(f, side)
        labels[i] = f.label
    return LabeledSet(images, masks, labels, [TAGS[split]] * size, split)


def aux_background(spec, index):
    rng = _rng(spec.rng_seed, "aux_bg", index)
    side = spec.image_side
    kind = int(rng.integers(0, 3))
    if kind == 0:
        recipe = ("smooth_noise", rng.uniform(1.0, 5.0) * side / 32, int(rng.integers(2**31)))
    elif kind == 1:
        recipe = ("clutter", int(rng.integers(2**31)))
    else:
        recipe = ("gradient", _random_color(rng), _random_color(rng), rng.uniform(0, 2 * np.pi), 0.05,
                  int(rng.integers(2**31)))
    return render_pattern(recipe, side)


def aux_distractor(spec, index):
    """A task-unrelated object: random blob with a random fill on a random backdrop."""
    rng = _rng(spec.rng_seed, "aux_obj", index)
    side = spec.image_side
    center = (side / 2 - 0.5, side / 2 - 0.5)
    mask = rasterize(blob_polygon(rng, center, side * rng.uniform(0.1, 0.18)), side)
    fill = render_pattern(("smooth_noise", rng.uniform(1.0, 4.0), int(rng.integers(2**31))), side)
    if rng.random() < 0.5:
        fill = render_pattern(("solid", _random_color(rng), 0.03, int(rng.integers(2**31))), side)
    return BankEntry(fill * mask[..., None], mask, None)


@dataclass
class Benchmark:
    spec: BenchSpec
    train: LabeledSet
    val: LabeledSet
    iid_test: LabeledSet
    ood_tests: dict
    backgrounds: list
    distractors: list

    def test_splits(self):
        """IID then the six nuisances, in table order."""
        return {"iid": self.iid_test, **{n: self.ood_tests[n] for n in NUISANCES}}


def generate(spec):
    """Build the train/val/IID/OOD splits and the task-unrelated pools."""
    return Benchmark(
        spec=spec,
        train=generate_split(spec, "train", spec.train_size),
        val=generate_split(spec, "val", spec.val_size),
        iid_test=generate_split(spec, "iid", spec.test_size_per_split),
        ood_tests={n: generate_split(spec, n, spec.test_size_per_split) for n in NUISANCES},
        backgrounds=[aux_background(spec, i) for i in range(spec.aux_size)],
        distractors=[aux_distractor(spec, i) for i in range(spec.aux_size)],
    )


# -- persistence ---------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def export(dataset, dir_path, with_labels=True):
    """Write PNGs and a line-oriented manifest; returns the manifest path."""
    os.makedirs(os.path.join(dir_path, "images"), exist_ok=True)
    os.makedirs(os.path.join(dir_path, "masks"), exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        rec = {"image": f"images/{i:05d}.png", "mask": f"masks/{i:05d}.png"}
        save_png(os.path.join(dir_path, rec["image"]), dataset.images[i])
        save_png(os.path.join(dir_path, rec["mask"]), dataset.masks[i])
        if with_labels:
            rec["label"] = int(dataset.labels[i])
        rec["nuisance_tag"] = dataset.tags[i]
        lines.append(json.dumps(rec, sort_keys=True))
    path = os.path.join(dir_path, MANIFEST)
    try:
        with open(path, "w") as f:
            f.write("".join(line + "\n" for line in lines))
    except OSError as e:
        raise OSError(f"cannot write manifest {path}: {e}") from e
    return path


def read_manifest(dir_path):
    path = os.path.join(dir_path, MANIFEST)
    try:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise OSError(f"cannot read manifest {path}: {e}") from e


def import_set(dir_path, side=None):
    recs = read_manifest(dir_path)
    name = os.path.basename(os.path.normpath(dir_path))
    if not recs:
        side = side or 32
        return LabeledSet(np.empty((0, side, side, 3)), np.empty((0, side, side)),
                          np.empty(0, dtype=np.int64), [], name)
    images = np.stack([load_png(os.path.join(dir_path, r["image"])) for r in recs])
    masks = np.stack([load_png(os.path.join(dir_path, r["mask"]), as_mask=True) for r in recs])
    labels = np.array([r.get("label", -1) for r in recs], dtype=np.int64)
    return LabeledSet(images, masks, labels, [r["nuisance_tag"] for r in recs], name)


def import_images(dir_path):
    """Load only the pixels of a split.  Label fields are never read."""
    recs = read_manifest(dir_path)
    return np.stack([load_png(os.path.join(dir_path, r["image"])) for r in recs])
