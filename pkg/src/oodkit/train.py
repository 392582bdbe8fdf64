"""Numpy MLP classifier with analytic gradients and the pre-training recipe."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import json
import logging
import math
import os

import numpy as np

from .errors import ConfigError, ContractViolation

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12
NORM_FLOOR = 0.05


@dataclass(frozen=True)
class ArchConfig:
    input_side: int = 32
    hidden: tuple = (128,)
    num_classes: int = 5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 1 <= len(self.hidden) <= 2:
            raise ConfigError("hidden must list one or two layer widths", field="train.hidden")

    @property
    def input_dim(self):
        return self.input_side * self.input_side * 3

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden, self.num_classes)

    def param_count(self):
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


@dataclass
class Classifier:
    arch: ArchConfig
    params: dict  # W0, b0, W1, b1, ...

    def copy(self):
        return Classifier(self.arch, {k: v.copy() for k, v in self.params.items()})

    @property
    def num_layers(self):
        return len(self.arch.layer_dims) - 1


def init_classifier(arch, rng):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    params = {}
    dims = arch.layer_dims
    for i in range(len(dims) - 1):
        bound = 1.0 / math.sqrt(dims[i])
        params[f"W{i}"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1]))
        params[f"b{i}"] = rng.uniform(-bound, bound, dims[i + 1])
    return Classifier(arch, params)


def zero_classifier(arch):
    dims = arch.layer_dims
    params = {}
    for i in range(len(dims) - 1):
        params[f"W{i}"] = np.zeros((dims[i], dims[i + 1]))
        params[f"b{i}"] = np.zeros(dims[i + 1])
    return Classifier(arch, params)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _flatten(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 4:
        x = x.reshape(len(x), -1)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ContractViolation(f"batch shape {np.shape(batch)} does not match input dim {model.arch.input_dim}")
    # per-image standardisation; the floor keeps flat images finite
    x = x - x.mean(axis=1, keepdims=True)
    return x / (x.std(axis=1, keepdims=True) + NORM_FLOOR)


def _forward_cache(model, batch):
    a = _flatten(model, batch)
    acts = [a]
    pre = []
    n = model.num_layers
    for i in range(n):
        z = a @ model.params[f"W{i}"] + model.params[f"b{i}"]
        pre.append(z)
        a = np.maximum(z, 0.0) if i < n - 1 else z
        acts.append(a)
    return a, (acts, pre)


def forward(model, batch):
    """Return ``(logits, probs)`` for an (N, H, W, 3) or (N, D) batch."""
    logits, _ = _forward_cache(model, batch)
    return logits, softmax(logits)


def _backward(model, cache, dlogits):
    acts, pre = cache
    grads = {}
    d = dlogits
    for i in reversed(range(model.num_layers)):
        grads[f"W{i}"] = acts[i].T @ d
        grads[f"b{i}"] = d.sum(axis=0)
        if i > 0:
            d = (d @ model.params[f"W{i}"].T) * (pre[i - 1] > 0)
    return grads


def ce_terms(probs, targets):
    """Mean soft-target cross-entropy and its gradient w.r.t. logits (unnormalised)."""
    loss = -(targets * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1)
    dlogits = probs * targets.sum(axis=1, keepdims=True) - targets
    return loss, dlogits


def mse_terms(probs, targets):
    """Per-sample mean squared error on probabilities and its logit gradient."""
    c = probs.shape[1]
    diff = probs - targets
    loss = (diff * diff).mean(axis=1)
    g = 2.0 * diff / c
    dlogits = probs * (g - (g * probs).sum(axis=1, keepdims=True))
    return loss, dlogits


def loss_and_grads(model, batch, targets, head="ce"):
    """Mean loss over the batch and its exact parameter gradients.

    ``head`` is ``"ce"`` (soft-target cross-entropy on logits) or ``"mse"``
    (squared error between softmax probabilities and targets).
    """
    targets = np.asarray(targets, dtype=np.float64)
    logits, cache = _forward_cache(model, batch)
    probs = softmax(logits)
    terms = ce_terms if head == "ce" else mse_terms
    loss, dlogits = terms(probs, targets)
    n = len(targets)
    return float(loss.mean()), _backward(model, cache, dlogits / n)


def prior_terms(probs, prior):
    """KL(prior || mean prediction) and its logit gradient.

    Keeps the batch-mean prediction near ``prior`` so self-training cannot
    drift into predicting a single class.
    """
    n = len(probs)
    mean = probs.mean(axis=0)
    loss = float((prior * np.log(prior / np.maximum(mean, PROB_FLOOR))).sum())
    g = -prior / np.maximum(mean, PROB_FLOOR) / n
    return loss, probs * (g - (probs * g).sum(axis=1, keepdims=True))


def mixed_loss_and_grads(model, batch, targets, n_labeled, unlabeled_weight, prior_weight=0.0):
    """CE over the first ``n_labeled`` rows plus weighted MSE over the rest.

    Each term is averaged over its own rows.  ``prior_weight`` adds a
    uniform-prior penalty on the mean prediction over all rows.  Returns
    ``(total, ce_loss, mse_loss, grads)``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    logits, cache = _forward_cache(model, batch)
    probs = softmax(logits)
    dlogits = np.zeros_like(probs)
    lx = lu = penalty = 0.0
    if n_labeled > 0:
        loss, d = ce_terms(probs[:n_labeled], targets[:n_labeled])
        lx = float(loss.mean())
        dlogits[:n_labeled] = d / n_labeled
    n_un = len(targets) - n_labeled
    if n_un > 0:
        loss, d = mse_terms(probs[n_labeled:], targets[n_labeled:])
        lu = float(loss.mean())
        dlogits[n_labeled:] = unlabeled_weight * d / n_un
    if prior_weight:
        c = probs.shape[1]
        penalty, d = prior_terms(probs, np.full(c, 1.0 / c))
        dlogits += prior_weight * d
    total = lx + unlabeled_weight * lu + prior_weight * penalty
    return total, lx, lu, _backward(model, cache, dlogits)


def smoothed_ce(probs, target, epsilon=0.1):
    """Label-smoothed cross-entropy for one probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 <= epsilon < 1.0:
        raise ContractViolation(f"epsilon {epsilon} outside [0, 1)")
    c = probs.shape[-1]
    q = np.full(c, epsilon / c)
    q[target] += 1.0 - epsilon
    return float(-(q * np.log(np.maximum(probs, PROB_FLOOR))).sum())


def smooth_targets(soft, epsilon):
    return (1.0 - epsilon) * soft + epsilon / soft.shape[1]


def worker_lanes():
    raw = os.environ.get("OODKIT_WORKERS", "1")
    try:
        lanes = int(raw)
    except ValueError:
        lanes = 0
    if lanes < 1:
        raise ConfigError(f"OODKIT_WORKERS must be a positive integer, got {raw!r}", field="env.OODKIT_WORKERS")
    return lanes


def predict_probs(model, images, chunk=512):
    """Softmax probabilities for a large batch, optionally over worker lanes."""
    n = len(images)
    if n == 0:
        return np.empty((0, model.arch.num_classes))
    chunks = [images[i:i + chunk] for i in range(0, n, chunk)]
    lanes = worker_lanes()
    if lanes > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(lanes) as pool:
            parts = list(pool.map(lambda c: forward(model, c)[1], chunks))
    else:
        parts = [forward(model, c)[1] for c in chunks]
    return np.concatenate(parts)


def accuracy(model, images, labels):
    if len(labels) == 0:
        return 0.0
    return float((predict_probs(model, images).argmax(axis=1) == labels).mean())


# -- optimisation ----------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.01
    warmup_epochs: float = 3.0
    warmup_start: float = 1e-6
    total_epochs: float = 100.0


def lr_at(schedule, epoch):
    """Linear warm-up from ``warmup_start`` to ``base_lr``, then cosine to zero."""
    s = schedule
    if not 0.0 <= epoch <= s.total_epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {s.total_epochs}]")
    if epoch < s.warmup_epochs:
        return s.warmup_start + (s.base_lr - s.warmup_start) * epoch / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs
    if span <= 0:
        return s.base_lr
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - s.warmup_epochs) / span))


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)
    step: int = 0


def sgd_step(model, grads, state, lr):
    """In-place momentum SGD with weight decay folded into the gradient."""
    for k, theta in model.params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise ContractViolation(f"gradient {k} shape {g.shape} != parameter {theta.shape}")
        v = state.buffers.get(k)
        if v is None:
            v = state.buffers[k] = np.zeros_like(theta)
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * theta
        theta -= lr * v
    state.step += 1
    return model, state


# -- pre-training ----------------------------------------------------------------

@dataclass(frozen=True)
class PretrainRecipe:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.01
    warmup_epochs: int = 3
    warmup_start: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 2e-5
    smoothing: float = 0.1
    patience: int = 10
    hidden: tuple = (128,)

    def schedule(self):
        return LrSchedule(self.base_lr, self.warmup_epochs, self.warmup_start, max(self.epochs, 1))


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # dicts with epoch, lr, loss, train_acc, val_acc
    best_epoch: int = -1
    best_val: float = -1.0


def pretrain(train_set, val_set, pipeline, recipe, rng, resources=None, model=None):
    """Supervised training with augmentation, early-stopped on validation accuracy.

    Returns ``(best_model, history)``.  ``rng`` drives init, shuffling and
    augmentation.
    """
    from .augment.pipeline import Resources

    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("pretrain needs non-empty train and validation sets", field="data")
    side = train_set.images.shape[1]
    num_classes = int(max(train_set.labels.max(), val_set.labels.max())) + 1
    arch = ArchConfig(side, recipe.hidden, num_classes)
    if model is None:
        model = init_classifier(arch, rng)
    history = TrainHistory()
    if recipe.epochs <= 0:
        return model, history
    resources = resources or Resources()
    state = OptimState(recipe.momentum, recipe.weight_decay)
    schedule = recipe.schedule()
    best = model.copy()
    n = len(train_set)
    steps = math.ceil(n / recipe.batch_size)
    stale = 0
    for epoch in range(recipe.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps):
            idx = order[b * recipe.batch_size:(b + 1) * recipe.batch_size]
            x, soft = pipeline.apply_batch(train_set.images[idx], train_set.masks[idx],
                                           train_set.labels[idx], num_classes, rng, resources)
            loss, grads = loss_and_grads(model, x, smooth_targets(soft, recipe.smoothing), "ce")
            sgd_step(model, grads, state, lr_at(schedule, epoch + b / steps))
            losses.append(loss)
        val_acc = accuracy(model, val_set.images, val_set.labels)
        history.epochs.append({"epoch": epoch + 1, "lr": lr_at(schedule, epoch + 1),
                               "loss": float(np.mean(losses)), "val_acc": val_acc})
        log.info("epoch %d loss %.4f val %.4f", epoch + 1, np.mean(losses), val_acc)
        # ties go to the later epoch: validation saturates long before the schedule ends
        if val_acc >= history.best_val:
            history.best_val, history.best_epoch = val_acc, epoch + 1
            best = model.copy()
            stale = 0
        else:
            stale += 1
            if stale >= recipe.patience:
                break
    return best, history


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model, state=None, epoch=0, rng_state=None, extra=None):
    meta = {"version": CHECKPOINT_VERSION, "arch": asdict(model.arch), "epoch": epoch,
            "rng_state": rng_state, "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    if state is not None:
        meta["optim"] = {"momentum": state.momentum, "weight_decay": state.weight_decay, "step": state.step}
        arrays.update({f"optim/{k}": v for k, v in state.buffers.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path, expect_arch=None):
    """Return ``(model, optim_state_or_None, meta)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arch = ArchConfig(**meta["arch"])
        if expect_arch is not None and arch != expect_arch:
            raise ContractViolation(f"{path}: architecture {arch} does not match expected {expect_arch}")
        params = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("param/")}
        state = None
        if "optim" in meta:
            o = meta["optim"]
            state = OptimState(o["momentum"], o["weight_decay"],
                               {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("optim/")},
                               o["step"])
    model = Classifier(arch, params)
    dims = arch.layer_dims
    for i in range(len(dims) - 1):
        if params[f"W{i}"].shape != (dims[i], dims[i + 1]):
            raise ContractViolation(f"{path}: parameter W{i} has shape {params[f'W{i}'].shape}")
    return model, state, meta
