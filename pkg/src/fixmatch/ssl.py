"""Semi-supervised objectives: FixMatch and the baselines it generalizes.

Every loss returns its value together with parameter gradients, computed by
an explicit backward pass. Labels produced from the model's own predictions
are constants: gradients flow only through the branch being trained.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import WeakAugConfig, strong_augment_batch, weak_augment_batch
from .core import PROB_FLOOR, argmax_onehot, cross_entropy, softmax
from .network import ce_loss_and_grads, images_to_tensor

STRONG_POLICIES = ("randaugment", "ctaugment", "mixup", "none")


@dataclass
class LabeledBatch:
    images: np.ndarray  # (B, H, W, C) uint8
    labels: np.ndarray  # (B, L) one-hot

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.ndim != 2 or not (
            np.all((self.labels == 0) | (self.labels == 1)) and np.all(self.labels.sum(axis=1) == 1)
        ):
            raise ValueError("labels must be one-hot rows")

    def __len__(self):
        return len(self.images)


@dataclass
class UnlabeledBatch:
    images: np.ndarray  # (muB, H, W, C) uint8
    hidden_labels: Optional[np.ndarray] = None  # diagnostics only

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.hidden_labels is not None and len(self.hidden_labels) != len(self.images):
            raise ValueError("hidden labels and images differ in length")

    def __len__(self):
        return len(self.images)


@dataclass
class FixMatchConfig:
    tau: float = 0.95
    lambda_u: float = 1.0
    mu: int = 7
    batch_size: int = 64
    temperature: float = 0.0  # 0 means hard pseudo-labels
    anchors: int = 1
    da_enabled: bool = False
    strong_policy: str = "ctaugment"
    mixup_alpha: float = 9.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if self.mu < 1 or self.batch_size < 1 or self.anchors < 1:
            raise ValueError("mu, batch_size and anchors must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.strong_policy not in STRONG_POLICIES:
            raise ValueError(f"unknown strong policy {self.strong_policy!r}")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")


@dataclass
class DaState:
    """Labeled class marginal and a running average of weak-branch predictions."""

    labeled_marginal: np.ndarray
    running: np.ndarray
    decay: float = 0.999

    @classmethod
    def from_labels(cls, labels, num_classes, decay=0.999):
        counts = np.bincount(np.asarray(labels), minlength=num_classes).astype(np.float64)
        return cls(counts / counts.sum(), np.full(num_classes, 1.0 / num_classes), decay)

    def update(self, batch_mean):
        self.running = self.decay * self.running + (1.0 - self.decay) * np.asarray(batch_mean)
        return self

    def copy(self):
        return DaState(self.labeled_marginal.copy(), self.running.copy(), self.decay)


@dataclass
class BatchStats:
    mask_rate: float
    impurity: Optional[float]
    mean_max_confidence: float
    weak_mean: Optional[np.ndarray] = None  # batch mean of weak-branch predictions


def _zeros_like(params):
    return [np.zeros_like(p) for p in params]


def _check_nonempty(n):
    if n == 0:
        raise ValueError("empty batch")


# -- label construction ------------------------------------------------------------------


def sharpen(q, temperature):
    """Temperature renormalization q^(1/T) / sum; T = 0 gives the argmax one-hot."""
    q = np.asarray(q, dtype=np.float64)
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        return argmax_onehot(q)
    with np.errstate(divide="ignore"):
        z = np.log(q) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_label(q, tau):
    """Hard label and whether the prediction is confident enough to keep."""
    q = np.asarray(q, dtype=np.float64)
    return argmax_onehot(q), q.max(axis=-1) >= tau


def distribution_align(q, da):
    """Reweight q by labeled_marginal / running average, then renormalize."""
    q = np.asarray(q, dtype=np.float64)
    ratio = da.labeled_marginal / np.maximum(da.running, PROB_FLOOR)
    r = q * ratio
    return r / r.sum(axis=-1, keepdims=True)


def batch_stats(retained, pseudo_labels, true_labels, confidences=None):
    retained = np.asarray(retained, dtype=bool)
    n = len(retained)
    if len(pseudo_labels) != n or len(true_labels) != n:
        raise ValueError("batch_stats inputs differ in length")
    kept = int(retained.sum())
    impurity = None
    if kept:
        wrong = np.asarray(pseudo_labels)[retained] != np.asarray(true_labels)[retained]
        impurity = float(wrong.sum()) / kept
    conf = float(np.mean(confidences)) if confidences is not None and n else float("nan")
    return BatchStats(kept / n if n else 0.0, impurity, conf)


# -- losses ---------------------------------------------------------------------------------


def supervised_loss(model, batch, weak_cfg, rng):
    """Mean cross-entropy on weakly augmented labeled images.

    Returns ``(loss, grads, probs)``.
    """
    _check_nonempty(len(batch))
    x = weak_augment_batch(batch.images, weak_cfg, rng)
    return ce_loss_and_grads(model, images_to_tensor(x), batch.labels)


def mixup_inputs(images, alpha, rng):
    """Blend each image with a randomly permuted partner using lambda ~ Beta(a, a).

    Returns float64 images; labels are left to the caller.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(len(images))
    return mix_pairs(images, lam, perm)


def mix_pairs(images, lam, perm):
    """lam * x_i + (1 - lam) * x_perm[i], in float64."""
    x = np.asarray(images, dtype=np.float64)
    return lam * x + (1.0 - lam) * x[perm]


def _strong_views(images, cfg, cta_state, rng):
    if cfg.strong_policy == "none":
        return np.asarray(images)
    if cfg.strong_policy == "mixup":
        return mixup_inputs(images, cfg.mixup_alpha, rng)
    return strong_augment_batch(images, cfg.strong_policy, cta_state, rng)


def _soft_ce_on_rows(model, x, targets, weights, denom):
    """sum_i w_i H(t_i, p_m(x_i)) / denom, forwarding only rows with w_i > 0."""
    rows = np.flatnonzero(weights > 0)
    if len(rows) == 0:
        return 0.0, _zeros_like(model.params)
    logits, tape = model.forward_train(images_to_tensor(x[rows]))
    p = softmax(logits)
    t, w = targets[rows], weights[rows, None]
    loss = float((w[:, 0] * cross_entropy(t, p)).sum() / denom)
    dlogits = w * (p * t.sum(axis=1, keepdims=True) - t) / denom
    return loss, model.backward(tape, dlogits)


def unsupervised_loss(model, batch, cfg, weak_cfg, cta_state, da_state, rng, weak_probs=None):
    """Thresholded pseudo-label cross-entropy against strongly augmented views.

    The label comes from a weakly augmented view (optionally distribution
    aligned, then sharpened when ``cfg.temperature > 0``) and is held fixed.
    With ``cfg.anchors = M`` the loss averages over M strong views. Passing
    ``weak_probs`` skips the weak forward pass and uses those predictions.

    Returns ``(loss, grads, stats)``.
    """
    n = len(batch)
    _check_nonempty(n)
    if weak_probs is None:
        weak = weak_augment_batch(batch.images, weak_cfg, rng)
        q = softmax(model.forward(images_to_tensor(weak)))
    else:
        q = np.asarray(weak_probs, dtype=np.float64)
    q_used = distribution_align(q, da_state) if cfg.da_enabled else q
    conf = q_used.max(axis=-1)
    retained = conf >= cfg.tau
    target = sharpen(q_used, cfg.temperature)
    mask = retained.astype(np.float64)

    loss, grads = 0.0, _zeros_like(model.params)
    denom = float(n * cfg.anchors)
    for _ in range(cfg.anchors):
        views = _strong_views(batch.images, cfg, cta_state, rng)
        l_m, g_m = _soft_ce_on_rows(model, views, target, mask, denom)
        loss += l_m
        for a, b in zip(grads, g_m):
            a += b

    hard = q_used.argmax(axis=-1)
    if batch.hidden_labels is not None:
        stats = batch_stats(retained, hard, batch.hidden_labels, conf)
    else:
        stats = BatchStats(float(retained.mean()), None, float(conf.mean()))
    stats.weak_mean = q.mean(axis=0)
    return loss, grads, stats


def total_loss(loss_s, loss_u, lambda_u):
    return loss_s + lambda_u * loss_u


def combine_grads(grads_s, grads_u, lambda_u):
    """Elementwise g_s + lambda_u * g_u."""
    return [gs + lambda_u * gu for gs, gu in zip(grads_s, grads_u)]


def pi_model_loss(model, images, weak_cfg, rng, reduction="sum"):
    """Squared L2 between predictions on two independent weak augmentations.

    Gradients flow through both branches. ``reduction`` is ``sum`` (over the
    batch) or ``mean``. Returns ``(loss, grads)``.
    """
    n = len(images)
    _check_nonempty(n)
    x1 = weak_augment_batch(images, weak_cfg, rng)
    x2 = weak_augment_batch(images, weak_cfg, rng)
    logits, tape = model.forward_train(images_to_tensor(np.concatenate([x1, x2])))
    p = softmax(logits)
    p1, p2 = p[:n], p[n:]
    diff = p1 - p2
    scale = 1.0 if reduction == "sum" else 1.0 / n
    loss = float((diff * diff).sum() * scale)
    dp = np.concatenate([2.0 * diff, -2.0 * diff]) * scale
    dlogits = p * (dp - (p * dp).sum(axis=1, keepdims=True))
    return loss, model.backward(tape, dlogits)


def pseudo_labeling_loss(model, images, tau):
    """Thresholded cross-entropy of un-augmented predictions against their own argmax.

    Returns ``(loss, grads, stats)``; stats carry no impurity.
    """
    n = len(images)
    _check_nonempty(n)
    logits, tape = model.forward_train(images_to_tensor(images))
    q = softmax(logits)
    target, retained = pseudo_label(q, tau)
    w = retained.astype(np.float64)[:, None]
    loss = float((w[:, 0] * cross_entropy(target, q)).sum() / n)
    grads = model.backward(tape, w * (q - target) / n)
    conf = q.max(axis=-1)
    return loss, grads, BatchStats(float(retained.mean()), None, float(conf.mean()), q.mean(axis=0))


def identity_weak_config():
    return WeakAugConfig(flip_enabled=False, max_translate_frac=0.0)
