"""Test-time adaptation as noisy-label learning.

Two copies of the pre-trained classifier co-teach on the unlabeled test set:
each epoch a two-component GMM over per-sample losses splits the pseudo-
labelled data into a labeled (likely clean) and an unlabeled part, labels
are co-refined / co-guessed from weak views, and the loss is optimised on
MixMatch-mixed strong views.  Pseudo-labels are re-inferred from both
models every ``refresh_period`` epochs.
"""
from dataclasses import asdict, dataclass, field
import json
import logging
import math

import numpy as np

from .augment.policy import strong_batch, weak_batch, AugPolicy
from .errors import ConfigError, ContaminationError, ContractViolation
from .train import OptimState, mixed_loss_and_grads, predict_probs, sgd_step

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
GMM_MAX_ITER = 100
GMM_TOL = 1e-6
FALLBACK_FRACTION = 0.1


@dataclass(frozen=True)
class TTTConfig:
    p: float = 0.8
    p_b: float | None = None  # threshold for model B; defaults to p
    refresh_period: float = 3
    sharpen_T: float = 0.5
    mix_alpha: float = 4.0
    lambda_u: float = 25.0
    lr: float = 0.02
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 6
    aug_views: int = 2
    batch_size: int = 48
    strong_ops: int = 2
    strong_magnitude: int = 9
    prior_penalty: float = 1.0  # uniform-prior weight on the mean prediction

    def __post_init__(self):
        for name in ("p", "p_b"):
            v = getattr(self, name)
            if v is not None and not 0.5 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0.5, 1), got {v}", field=f"ttt.{name}")
        if not self.refresh_period >= 1:
            raise ConfigError("refresh_period must be >= 1", field="ttt.refresh_period")
        if self.sharpen_T <= 0:
            raise ConfigError("sharpen_T must be > 0", field="ttt.sharpen_T")
        if self.aug_views < 1:
            raise ConfigError("aug_views must be >= 1", field="ttt.aug_views")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="ttt.batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", field="ttt.epochs")

    @property
    def threshold_b(self):
        return self.p if self.p_b is None else self.p_b

    def strong_policy(self):
        return AugPolicy("strong", self.strong_ops, self.strong_magnitude)


# -- pseudo labels ---------------------------------------------------------------

def _member_probs(models, images):
    if not isinstance(models, (list, tuple)):
        models = [models]
    return np.mean([predict_probs(m, images) for m in models], axis=0)


def assign_noisy_labels(models, images):
    """Argmax pseudo-labels; ``np.argmax`` breaks ties toward the lowest class."""
    return _member_probs(models, images).argmax(axis=1)


def per_sample_ce(model, images, labels):
    probs = predict_probs(model, images)
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-12))


# -- GMM -------------------------------------------------------------------------

@dataclass
class GmmFit:
    means: np.ndarray  # (2,), clean component first
    variances: np.ndarray
    weights: np.ndarray
    clean_prob: np.ndarray  # per-sample posterior of the clean component
    log_likelihood: float
    iterations: int = 0
    degenerate: bool = False


def _log_normal(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x[:, None] - mean) ** 2 / var)


def gmm_log_likelihood(x, means, variances, weights):
    comp = _log_normal(x, means, variances) + np.log(weights)
    return float(np.logaddexp(comp[:, 0], comp[:, 1]).sum())


def _monotone_clean(x, post_clean, means, variances):
    """Make the clean posterior non-increasing in the loss.

    With unequal variances the log-odds is a parabola; outside its vertex the
    wider component wins back the tail.  Clip the posterior to its envelope.
    """
    order = np.argsort(x, kind="stable")
    p = post_clean[order]
    if variances[0] < variances[1]:
        p = np.maximum.accumulate(p[::-1])[::-1]
    elif variances[0] > variances[1]:
        p = np.minimum.accumulate(p)
    out = np.empty_like(p)
    out[order] = p
    return out


def fit_loss_gmm(losses, max_iter=GMM_MAX_ITER, tol=GMM_TOL):
    """Two-component 1-D GMM over min-max normalised losses.

    Returns a :class:`GmmFit` whose ``clean_prob`` is the posterior of the
    lower-mean component.  Identical losses give ``clean_prob = 1``.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size < 10:
        raise ContractViolation(f"need >= 10 losses, got {losses.size}")
    if not np.all(np.isfinite(losses)):
        raise ContractViolation("losses must be finite")
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        n = losses.size
        return GmmFit(np.array([0.0, 0.0]), np.array([VAR_FLOOR] * 2), np.array([1.0, 0.0]),
                      np.ones(n), 0.0, 0, True)
    x = (losses - lo) / (hi - lo)
    means = np.percentile(x, [10, 90]).astype(np.float64)
    variances = np.full(2, max(x.var(), VAR_FLOOR))
    weights = np.array([0.5, 0.5])
    prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        comp = _log_normal(x, means, variances) + np.log(weights)
        norm = np.logaddexp(comp[:, 0], comp[:, 1])
        resp = np.exp(comp - norm[:, None])
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / nk.sum()
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = np.maximum((resp * (x[:, None] - means) ** 2).sum(axis=0) / nk, VAR_FLOOR)
        ll = gmm_log_likelihood(x, means, variances, weights)
        if abs(ll - prev) < tol:
            break
        prev = ll
    if means[0] > means[1]:
        means, variances, weights = means[::-1].copy(), variances[::-1].copy(), weights[::-1].copy()
    comp = _log_normal(x, means, variances) + np.log(weights)
    post = np.exp(comp[:, 0] - np.logaddexp(comp[:, 0], comp[:, 1]))
    post = _monotone_clean(x, post, means, variances)
    return GmmFit(means, variances, weights, post, gmm_log_likelihood(x, means, variances, weights), it)


# -- label arithmetic ------------------------------------------------------------

def sharpen(v, T):
    """Temperature sharpening along the last axis: v^(1/T) / sum v^(1/T)."""
    v = np.asarray(v, dtype=np.float64)
    # rescale by the max first so 1/T powers cannot underflow to all-zero
    v = v / v.max(axis=-1, keepdims=True)
    s = v ** (1.0 / T)
    return s / s.sum(axis=-1, keepdims=True)


def refine_labels(mean_probs, clean_prob, noisy_labels, T):
    """Co-refinement: sharpen(w * onehot(y) + (1 - w) * p_bar)."""
    mean_probs = np.atleast_2d(mean_probs)
    w = np.asarray(clean_prob, dtype=np.float64).reshape(-1, 1)
    onehot = np.eye(mean_probs.shape[1])[np.atleast_1d(noisy_labels)]
    return sharpen(w * onehot + (1.0 - w) * mean_probs, T)


def guess_labels(prob_views, T):
    """Co-guessing: sharpen the mean of a list of (N, C) probability arrays."""
    return sharpen(np.mean(prob_views, axis=0), T)


def co_refine(own_model, images, clean_prob, noisy_labels, T, views, rng):
    p_bar = np.mean([predict_probs(own_model, weak_batch(images, rng)) for _ in range(views)], axis=0)
    return refine_labels(p_bar, clean_prob, noisy_labels, T)


def co_guess(model_a, model_b, images, T, views, rng):
    probs = []
    for _ in range(views):
        probs.append(predict_probs(model_a, weak_batch(images, rng)))
        probs.append(predict_probs(model_b, weak_batch(images, rng)))
    return guess_labels(probs, T)


# -- MixMatch --------------------------------------------------------------------

@dataclass
class MixResult:
    loss: float
    loss_x: float
    loss_u: float
    grads: dict
    lam: float


def mixmatch_step(model, x_lab, t_lab, x_unl, t_unl, config, lambda_u, rng, lam=None, augment=True):
    """One MixMatch gradient evaluation on strong views.

    ``lam`` overrides the Beta draw; the value actually used is
    ``max(lam, 1 - lam)``.
    """
    n_lab = len(x_lab)
    if n_lab == 0:
        raise ContractViolation("labeled batch is empty")
    if x_unl is None or len(x_unl) == 0:
        inputs, targets = x_lab, np.asarray(t_lab, dtype=np.float64)
    else:
        inputs = np.concatenate([x_lab, x_unl])
        targets = np.concatenate([t_lab, t_unl]).astype(np.float64)
    if augment:
        inputs = strong_batch(inputs, config.strong_policy(), rng)
    if lam is None:
        lam = rng.beta(config.mix_alpha, config.mix_alpha)
    lam = max(float(lam), 1.0 - float(lam))
    idx = rng.permutation(len(inputs))
    if lam < 1.0:
        inputs = lam * inputs + (1.0 - lam) * inputs[idx]
        targets = lam * targets + (1.0 - lam) * targets[idx]
    total, lx, lu, grads = mixed_loss_and_grads(model, inputs, targets, n_lab, lambda_u, config.prior_penalty)
    return MixResult(total, lx, lu, grads, lam)


# -- the loop --------------------------------------------------------------------

@dataclass
class Split:
    """Division used to train one model, computed from the *other* model."""

    clean_prob: np.ndarray
    labeled: np.ndarray  # bool mask
    fallback: bool = False


@dataclass
class TTTState:
    model_a: object
    model_b: object
    images: np.ndarray
    noisy_labels: np.ndarray
    config: TTTConfig
    epoch: int = 0
    opt_a: OptimState = None
    opt_b: OptimState = None

    def __post_init__(self):
        c = self.config
        if self.opt_a is None:
            self.opt_a = OptimState(c.momentum, c.weight_decay)
        if self.opt_b is None:
            self.opt_b = OptimState(c.momentum, c.weight_decay)


def split_from_losses(losses, p):
    fit = fit_loss_gmm(losses)
    labeled = fit.clean_prob >= p
    fallback = False
    if not labeled.any():
        k = max(1, int(math.ceil(FALLBACK_FRACTION * len(losses))))
        labeled = np.zeros(len(losses), dtype=bool)
        labeled[np.argsort(losses, kind="stable")[:k]] = True
        fallback = True
    return Split(fit.clean_prob, labeled, fallback)


def co_divide(state):
    """Returns ``(split_for_a, split_for_b)``; each comes from the other model's losses."""
    c = state.config
    loss_a = per_sample_ce(state.model_a, state.images, state.noisy_labels)
    loss_b = per_sample_ce(state.model_b, state.images, state.noisy_labels)
    return split_from_losses(loss_b, c.p), split_from_losses(loss_a, c.threshold_b)


def refresh_labels(state):
    """Re-infer pseudo-labels from the A/B-averaged probabilities."""
    return assign_noisy_labels([state.model_a, state.model_b], state.images)


def lambda_u_at(config, epoch_progress):
    if math.isinf(config.refresh_period):
        return config.lambda_u
    return config.lambda_u * min(1.0, epoch_progress / config.refresh_period)


def _train_one(model, other, opt, split, state, rng):
    c = state.config
    lab = np.flatnonzero(split.labeled)
    unl = np.flatnonzero(~split.labeled)
    lab = lab[rng.permutation(len(lab))]
    unl = unl[rng.permutation(len(unl))]
    steps = math.ceil(len(lab) / c.batch_size)
    stats = []
    for b in range(steps):
        xi = lab[b * c.batch_size:(b + 1) * c.batch_size]
        x = state.images[xi]
        t_x = co_refine(model, x, split.clean_prob[xi], state.noisy_labels[xi], c.sharpen_T, c.aug_views, rng)
        if len(unl):
            ui = np.take(unl, np.arange(b * len(xi), (b + 1) * len(xi)), mode="wrap")
            u = state.images[ui]
            t_u = co_guess(model, other, u, c.sharpen_T, c.aug_views, rng)
        else:
            u, t_u = None, None
        lam_u = lambda_u_at(c, state.epoch + b / steps)
        res = mixmatch_step(model, x, t_x, u, t_u, c, lam_u, rng)
        sgd_step(model, res.grads, opt, c.lr)
        stats.append((res.loss, res.loss_x, res.loss_u))
    return np.mean(stats, axis=0) if stats else np.zeros(3)


@dataclass
class TTTResult:
    model_a: object
    model_b: object
    noisy_labels: np.ndarray
    history: list = field(default_factory=list)


def _check_unlabeled(images):
    if hasattr(images, "labels"):
        raise ContaminationError("test-time training accepts images only; got an object with labels")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ContractViolation(f"expected an (N, H, W, 3) image array, got {images.shape}")
    return images


def run_ttt(pretrained, images, config, seed_a=1, seed_b=2, on_epoch=None, log_file=None):
    """Adapt two copies of ``pretrained`` on unlabeled ``images``.

    ``on_epoch(state, record)`` is called after every epoch; ``log_file``
    (an open text handle) receives one JSON record per epoch.
    """
    images = _check_unlabeled(images)
    state = TTTState(pretrained.copy(), pretrained.copy(), images,
                     assign_noisy_labels(pretrained, images), config)
    rng_a, rng_b = np.random.default_rng(seed_a), np.random.default_rng(seed_b)
    history = []
    for epoch in range(config.epochs):
        state.epoch = epoch
        refreshed = False
        changed = 0.0
        if epoch > 0 and not math.isinf(config.refresh_period) and epoch % int(config.refresh_period) == 0:
            new = refresh_labels(state)
            changed = float((new != state.noisy_labels).mean())
            state.noisy_labels = new
            refreshed = True
        split_a, split_b = co_divide(state)
        loss_a = _train_one(state.model_a, state.model_b, state.opt_a, split_a, state, rng_a)
        loss_b = _train_one(state.model_b, state.model_a, state.opt_b, split_b, state, rng_b)
        pa = predict_probs(state.model_a, images).argmax(axis=1)
        pb = predict_probs(state.model_b, images).argmax(axis=1)
        record = {
            "epoch": epoch + 1, "refreshed": refreshed, "label_change": changed,
            "labeled_a": int(split_a.labeled.sum()), "labeled_b": int(split_b.labeled.sum()),
            "fallback_a": split_a.fallback, "fallback_b": split_b.fallback,
            "loss_a": float(loss_a[0]), "loss_x_a": float(loss_a[1]), "loss_u_a": float(loss_a[2]),
            "loss_b": float(loss_b[0]), "loss_x_b": float(loss_b[1]), "loss_u_b": float(loss_b[2]),
            "agreement": float((pa == pb).mean()),
            "lambda_u": lambda_u_at(config, epoch + 1),
        }
        history.append(record)
        log.info("ttt epoch %d labeled %d/%d agreement %.3f", epoch + 1, record["labeled_a"],
                 record["labeled_b"], record["agreement"])
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(state, record)
    state.epoch = config.epochs
    return TTTResult(state.model_a, state.model_b, state.noisy_labels, history)


def config_doc(config):
    return asdict(config)
