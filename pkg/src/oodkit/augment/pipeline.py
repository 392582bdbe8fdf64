"""Declarative stage-1 augmentation pipeline.

A pipeline is an ordered tuple of stages, each with a firing probability.
Per-sample stages run in the listed order; ``cutmix`` runs last over the
whole batch, pairing each sample with a random partner.  The document form
is a list of ``{"name": ..., "prob": ..., **params}`` mappings.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from ..errors import ConfigError
from ..imaging import AffineParams, ColorParams
from .copypaste import BankEntry, CutMixParams, copy_paste_context, copy_paste_occlusion, cutmix
from .policy import strong, weak
from .weather import Weather, WeatherKind, weather

STAGE_PARAMS = {
    "weak": {},
    "strong": {"op_count": 2, "magnitude": 9},
    "copy_paste_context": {"max_shift": 0.125, "objects": 1},
    "copy_paste_occlusion": {"coverage_cap": 0.4, "objects": 1},
    "weather": {"min_severity": 1, "max_severity": 5},
    "cutmix": {"alpha": 1.0},
}
DEFAULT_PROB = 0.5


@dataclass(frozen=True)
class Stage:
    name: str
    prob: float = DEFAULT_PROB
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in STAGE_PARAMS:
            raise ConfigError(f"unknown augmentation stage {self.name!r}", field="augment.stages.name")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError(f"stage probability {self.prob} outside [0, 1]", field=f"augment.{self.name}.prob")
        unknown = set(self.params) - set(STAGE_PARAMS[self.name])
        if unknown:
            raise ConfigError(f"unknown parameter(s) {sorted(unknown)}", field=f"augment.{self.name}.{sorted(unknown)[0]}")
        merged = dict(STAGE_PARAMS[self.name])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    def to_doc(self):
        return {"name": self.name, "prob": self.prob, **self.params}

    @classmethod
    def from_doc(cls, doc):
        doc = dict(doc)
        try:
            name = doc.pop("name")
        except KeyError:
            raise ConfigError("stage without a name", field="augment.stages.name") from None
        prob = doc.pop("prob", 1.0 if name == "weak" else DEFAULT_PROB)
        return cls(name, float(prob), doc)


@dataclass(frozen=True)
class Resources:
    """Task-unrelated material the pasting stages draw from."""

    backgrounds: tuple = ()
    distractors: tuple = ()  # BankEntry with class_id None


def random_object_affine(rng):
    # pose jitter stays inside the training pose range; wider rotations cost
    # more in-distribution accuracy than they buy on shifted poses
    s = rng.uniform(0.9, 1.1)
    return AffineParams(
        rotation=rng.uniform(-math.pi / 9, math.pi / 9),
        scale_x=s * rng.uniform(0.95, 1.05), scale_y=s,
        flip_h=bool(rng.random() < 0.5))


def random_object_color(rng):
    return ColorParams(
        brightness_delta=rng.uniform(-0.1, 0.1), contrast_gain=rng.uniform(0.8, 1.2),
        saturation_gain=rng.uniform(0.7, 1.3), hue_shift=rng.uniform(-math.pi, math.pi))


_WEATHER_KINDS = tuple(Weather)


@dataclass(frozen=True)
class AugPipeline:
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def from_doc(cls, docs):
        return cls(tuple(Stage.from_doc(d) for d in docs))

    def to_doc(self):
        return [s.to_doc() for s in self.stages]

    @property
    def needs_resources(self):
        return any(s.name.startswith("copy_paste") for s in self.stages)

    def augment_sample(self, img, mask, label, rng, resources):
        out = img
        for st in self.stages:
            if st.name == "cutmix" or rng.random() >= st.prob:
                continue
            p = st.params
            if st.name == "weak":
                out = weak(out, rng)
            elif st.name == "strong":
                out = strong(out, p["op_count"], p["magnitude"], rng)
            elif st.name == "weather":
                kind = WeatherKind(_WEATHER_KINDS[int(rng.integers(0, 4))],
                                   int(rng.integers(p["min_severity"], p["max_severity"] + 1)))
                out = weather(out, kind, rng)
            elif st.name == "copy_paste_context":
                obj = BankEntry(out, mask, int(label))
                for _ in range(p["objects"]):
                    out, _ = copy_paste_context(resources.backgrounds, obj, random_object_affine(rng),
                                                random_object_color(rng), rng, max_shift=p["max_shift"])
                    obj = BankEntry(out, mask, int(label))
            elif st.name == "copy_paste_occlusion":
                if not resources.distractors:
                    raise ConfigError("occlusion stage needs distractor objects", field="augment.distractors")
                for _ in range(p["objects"]):
                    d = resources.distractors[int(rng.integers(0, len(resources.distractors)))]
                    out, _ = copy_paste_occlusion((out, label), d, random_object_affine(rng),
                                                  random_object_color(rng), rng, p["coverage_cap"])
        return out

    def apply_batch(self, images, masks, labels, num_classes, rng, resources=Resources()):
        """Augment a batch; returns images and soft labels of shape (N, C)."""
        out = np.empty_like(images)
        for i in range(len(images)):
            out[i] = self.augment_sample(images[i], masks[i], labels[i], rng, resources)
        soft = np.eye(num_classes)[np.asarray(labels)]
        for st in self.stages:
            if st.name != "cutmix":
                continue
            partner = rng.permutation(len(out))
            mixed, mixed_soft = out.copy(), soft.copy()
            params = CutMixParams(alpha=st.params["alpha"])
            for i in range(len(out)):
                if rng.random() < st.prob:
                    j = partner[i]
                    mixed[i], mixed_soft[i] = cutmix((out[i], soft[i]), (out[j], soft[j]), params, rng)
            out, soft = mixed, mixed_soft
        return out, soft
