"""TenCrop inference, entropy-gated ensembling and per-split metrics."""
from dataclasses import dataclass, field
import json

import numpy as np

from .errors import ConfigError, ContractViolation
from .imaging import resize
from .train import predict_probs

SPLIT_ORDER = ("iid", "shape", "pose", "context", "texture", "occlusion", "weather")
NUISANCE_SPLITS = SPLIT_ORDER[1:]
TABLE_COLUMNS = ("IID", "Shape", "Pose", "Context", "Texture", "Occlusion", "Weather", "Avg.")
DEFAULT_ENTROPY_FACTOR = 2.0 / 3.0


def default_crop_side(side):
    return int(np.floor(0.875 * side))


def tencrop(img, crop_side=None):
    """Ten crops of an (H, W, C) image or an (N, H, W, C) batch.

    Order: top-left, top-right, bottom-left, bottom-right, centre, then the
    horizontal flips of the same five.  The crop axis comes first.
    """
    img = np.asarray(img)
    h, w = img.shape[-3], img.shape[-2]
    cs = default_crop_side(min(h, w)) if crop_side is None else int(crop_side)
    if cs > min(h, w) or cs < 1:
        raise ContractViolation(f"crop side {cs} does not fit a {h}x{w} image")
    cy, cx = (h - cs) // 2, (w - cs) // 2
    origins = ((0, 0), (0, w - cs), (h - cs, 0), (h - cs, w - cs), (cy, cx))
    crops = [img[..., y:y + cs, x:x + cs, :] for y, x in origins]
    crops += [c[..., :, ::-1, :] for c in crops]
    return np.stack(crops)


def _as_members(models):
    return list(models) if isinstance(models, (list, tuple)) else [models]


def predict_single(models, images):
    """Plain forward; a list of models is averaged in probability space."""
    return np.mean([predict_probs(m, images) for m in _as_members(models)], axis=0)


def predict_tencrop(models, images, crop_side=None):
    """Mean softmax over the ten crops, each resized back to the input side."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    h, w = images.shape[1:3]
    total = 0.0
    for crop in tencrop(images, crop_side):
        if crop.shape[1:3] != (h, w):
            crop = resize(crop, h, w)
        total = total + predict_single(models, crop)
    out = total / 10.0
    return out[0] if single else out


def entropy(probs):
    """Shannon entropy (nats) along the last axis with 0 * ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


@dataclass(frozen=True)
class EnsembleConfig:
    anchor_index: int = 0
    entropy_factor: float = DEFAULT_ENTROPY_FACTOR
    members: int = 4

    def __post_init__(self):
        if not 0.0 < self.entropy_factor <= 1.0:
            raise ConfigError("entropy_factor must lie in (0, 1]", field="ensemble.entropy_factor")
        if self.members < 2:
            raise ConfigError("an ensemble needs >= 2 members", field="ensemble.members")
        if not 0 <= self.anchor_index < self.members:
            raise ConfigError("anchor_index out of range", field="ensemble.anchor_index")


@dataclass
class EnsembleResult:
    labels: np.ndarray
    probs: np.ndarray
    routed_anchor: np.ndarray  # bool per sample
    mean_entropy: float

    @property
    def ensemble_fraction(self):
        return float(1.0 - self.routed_anchor.mean()) if len(self.routed_anchor) else 0.0


def adaptive_ensemble(member_probs, anchor_index=0, factor=DEFAULT_ENTROPY_FACTOR):
    """Entropy-gated fusion of precomputed member probabilities.

    Pass 1 collects the anchor's entropies and their mean over the whole set;
    pass 2 keeps the anchor's prediction where its entropy is below
    ``factor * mean`` and uses the unweighted member mean elsewhere.
    """
    member_probs = [np.asarray(p, dtype=np.float64) for p in member_probs]
    if len(member_probs) < 2:
        raise ContractViolation("adaptive_ensemble needs >= 2 members")
    if not 0 <= anchor_index < len(member_probs):
        raise ContractViolation(f"anchor_index {anchor_index} out of range")
    anchor = member_probs[anchor_index]
    h = entropy(anchor)
    mean_h = float(h.mean()) if len(h) else 0.0
    trust = h < factor * mean_h
    fused = np.where(trust[:, None], anchor, np.mean(member_probs, axis=0))
    return EnsembleResult(fused.argmax(axis=1), fused, trust, mean_h)


def ensemble_predict(members, images, anchor_index=0, factor=DEFAULT_ENTROPY_FACTOR, crop_side=None):
    probs = [predict_tencrop(m, images, crop_side) for m in members]
    return adaptive_ensemble(probs, anchor_index, factor)


# -- metrics ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: dict  # split -> top-1 accuracy
    confusion: dict = field(default_factory=dict)  # split -> C x C nested list
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ood_avg(self):
        return float(np.mean([self.accuracy[s] for s in NUISANCE_SPLITS]))

    def row(self):
        return [self.accuracy[s] for s in SPLIT_ORDER] + [self.ood_avg]

    def to_doc(self):
        return {"accuracy": self.accuracy, "ood_avg": self.ood_avg, "counts": self.counts,
                "confusion": self.confusion, "extra": self.extra}


def confusion_matrix(labels, preds, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def evaluate(predictions, ground_truth, num_classes=None):
    """Per-split top-1 accuracy.

    ``predictions`` and ``ground_truth`` map split name -> label arrays and
    must cover the IID split and all six nuisance splits.
    """
    acc, conf, counts = {}, {}, {}
    for split in SPLIT_ORDER:
        if split not in predictions or split not in ground_truth:
            raise ContractViolation(f"missing split {split!r}")
        pred = np.asarray(predictions[split])
        truth = np.asarray(ground_truth[split])
        if pred.shape != truth.shape:
            raise ContractViolation(f"{split}: {len(pred)} predictions for {len(truth)} samples")
        acc[split] = float((pred == truth).mean()) if len(truth) else 0.0
        counts[split] = int(len(truth))
        c = num_classes or int(max(truth.max(initial=0), pred.max(initial=0)) + 1)
        conf[split] = confusion_matrix(truth, pred, c).tolist()
    return MetricsReport(acc, conf, counts)


def format_table(rows, title="Method"):
    """Plain-text table; ``rows`` is a list of (name, MetricsReport)."""
    width = max([len(title)] + [len(name) for name, _ in rows])
    head = f"{title:<{width}} | " + " | ".join(f"{c:>9}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, report in rows:
        lines.append(f"{name:<{width}} | " + " | ".join(f"{100 * v:9.2f}" for v in report.row()))
    return "\n".join(lines) + "\n"


def write_predictions(path, result, ids=None):
    """Line-oriented records: sample id, predicted class, fused probs, route."""
    with open(path, "w") as f:
        for i in range(len(result.labels)):
            rec = {"id": ids[i] if ids is not None else i, "pred": int(result.labels[i]),
                   "probs": [round(float(p), 8) for p in result.probs[i]],
                   "routed": "anchor" if result.routed_anchor[i] else "ensemble"}
            f.write(json.dumps(rec) + "\n")
