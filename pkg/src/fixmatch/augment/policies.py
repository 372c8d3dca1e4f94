"""Weak and strong augmentation policies.

The batch entry points draw every random quantity for the whole batch up
front from one generator, in example order, so the result depends only on
the generator's key and not on how the batch is later split up.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import RESCALE_METHODS, TransformSpec

log = logging.getLogger(__name__)

# RandAugment catalogue: kind -> magnitude range (None: no magnitude).
RANDAUGMENT_RANGES = {
    "Autocontrast": None,
    "Brightness": (0.05, 0.95),
    "Color": (0.05, 0.95),
    "Contrast": (0.05, 0.95),
    "Equalize": None,
    "Identity": None,
    "Posterize": (4.0, 8.0),
    "Rotate": (-30.0, 30.0),
    "Sharpness": (0.05, 0.95),
    "ShearX": (-0.3, 0.3),
    "ShearY": (-0.3, 0.3),
    "Solarize": (0.0, 1.0),
    "TranslateX": (-0.3, 0.3),
    "TranslateY": (-0.3, 0.3),
}
RANDAUGMENT_KINDS = tuple(RANDAUGMENT_RANGES)

# CTAugment catalogue: kind -> list of parameter ranges. A range is either
# (lo, hi), discretised into CTA_BINS bins, or an int n for a categorical
# parameter with n options.
CTA_BINS = 17
CTAUGMENT_PARAMS = {
    "Autocontrast": [(0.0, 1.0)],
    "Brightness": [(0.0, 1.0)],
    "Color": [(0.0, 1.0)],
    "Contrast": [(0.0, 1.0)],
    "Cutout": [(0.0, 0.5)],
    "Equalize": [(0.0, 1.0)],
    "Invert": [(0.0, 1.0)],
    "Identity": [],
    "Posterize": [(1.0, 8.0)],
    "Rescale": [(0.5, 1.0), len(RESCALE_METHODS)],
    "Rotate": [(-45.0, 45.0)],
    "Sharpness": [(0.0, 1.0)],
    "ShearX": [(-0.3, 0.3)],
    "ShearY": [(-0.3, 0.3)],
    "Smooth": [(0.0, 1.0)],
    "Solarize": [(0.0, 1.0)],
    "TranslateX": [(-0.3, 0.3)],
    "TranslateY": [(-0.3, 0.3)],
}
CTAUGMENT_KINDS = tuple(CTAUGMENT_PARAMS)
PIPELINE_LENGTH = 2


@dataclass
class WeakAugConfig:
    flip_enabled: bool = True
    max_translate_frac: float = 0.125

    def __post_init__(self):
        if not 0.0 <= self.max_translate_frac <= 0.5:
            raise ValueError("max_translate_frac must lie in [0, 0.5]")


def weak_augment_batch(imgs, cfg, rng):
    """Random horizontal flip (p=0.5) then an integer shift in each axis."""
    imgs = ops.as_batch(imgs)
    n, h, w, _ = imgs.shape
    flips = rng.random(n) < 0.5
    mx = int(np.floor(cfg.max_translate_frac * w + 1e-9))
    my = int(np.floor(cfg.max_translate_frac * h + 1e-9))
    dx = rng.integers(-mx, mx + 1, size=n)
    dy = rng.integers(-my, my + 1, size=n)
    out = imgs
    if cfg.flip_enabled and flips.any():
        out = imgs.copy()
        out[flips] = ops.hflip(imgs[flips])
    if mx or my:
        out = ops.shift(out, dx, dy)
    return out if out is not imgs else imgs.copy()


def weak_augment(img, cfg, rng):
    img = np.asarray(img)
    return weak_augment_batch(img, cfg, rng)[0].reshape(img.shape)


def cutout(img, frac, rng):
    """Gray square of side ``floor(frac * width)`` at a uniform random centre."""
    if not 0.0 <= frac <= 0.5:
        raise ValueError("cutout fraction must lie in [0, 0.5]")
    img = np.asarray(img)
    center = tuple(rng.random(2))
    return ops.cutout(ops.as_batch(img), [frac], [center])[0].reshape(img.shape)


# -- RandAugment ------------------------------------------------------------------


def randaugment_sample_batch(rng, n):
    """``n`` pipelines of two transforms with uniform random magnitudes."""
    kinds = rng.integers(0, len(RANDAUGMENT_KINDS), size=(n, PIPELINE_LENGTH))
    u = rng.random((n, PIPELINE_LENGTH))
    out = []
    for i in range(n):
        pipe = []
        for j in range(PIPELINE_LENGTH):
            kind = RANDAUGMENT_KINDS[kinds[i, j]]
            rng_ = RANDAUGMENT_RANGES[kind]
            mag = None if rng_ is None else float(rng_[0] + (rng_[1] - rng_[0]) * u[i, j])
            pipe.append(TransformSpec(kind, mag))
        out.append(pipe)
    return out


def randaugment_sample(rng):
    return randaugment_sample_batch(rng, 1)[0]


# -- CTAugment ------------------------------------------------------------------


def _n_bins(param):
    return param if isinstance(param, int) else CTA_BINS


def bin_value(param, b):
    """Magnitude for bin ``b``: the bin centre, or the option index."""
    if isinstance(param, int):
        return b
    lo, hi = param
    return lo + (hi - lo) * (b + 0.5) / CTA_BINS


class CtaState:
    """Per (kind, parameter) magnitude-bin weights learned online.

    Bins whose weight falls below ``threshold`` times the largest weight of
    their parameter are excluded from sampling; the rest are drawn in
    proportion to their weight. On a fresh state (all weights 1) the cut is
    simply ``weight < threshold``.
    """

    def __init__(self, decay=0.99, threshold=0.85):
        self.decay = float(decay)
        self.threshold = float(threshold)
        self.weights = {
            (kind, p): np.ones(_n_bins(param))
            for kind, params in CTAUGMENT_PARAMS.items()
            for p, param in enumerate(params)
        }

    def keys(self):
        return sorted(self.weights)

    def probs(self, kind, p):
        w = self.weights[(kind, p)]
        top = w.max()
        kept = np.where(w >= self.threshold * top, w, 0.0) if top > 0 else w
        if kept.sum() <= 0:
            log.warning("all CTAugment bins of %s[%d] are zero; sampling uniformly", kind, p)
            return np.full(len(w), 1.0 / len(w))
        return kept / kept.sum()

    def copy(self):
        out = CtaState(self.decay, self.threshold)
        out.weights = {k: v.copy() for k, v in self.weights.items()}
        return out

    def to_array(self):
        return np.concatenate([self.weights[k] for k in self.keys()])

    def load_array(self, flat):
        pos = 0
        for k in self.keys():
            n = len(self.weights[k])
            self.weights[k] = np.array(flat[pos:pos + n], dtype=np.float64)
            pos += n
        if pos != len(flat):
            raise ValueError("CTAugment weight vector has the wrong length")


def _cta_pipelines(state, rng, n, uniform_bins):
    """Return (specs, bins) for ``n`` pipelines.

    ``bins[i]`` lists the ``(kind, param, bin)`` triples used by pipeline
    ``i``. With ``uniform_bins`` the bin weights are ignored.
    """
    kinds = rng.integers(0, len(CTAUGMENT_KINDS), size=(n, PIPELINE_LENGTH))
    u = rng.random((n, PIPELINE_LENGTH, 2))
    centers = rng.random((n, PIPELINE_LENGTH, 2))
    cdfs = {}
    if not uniform_bins:
        for key in state.keys():
            cdfs[key] = np.cumsum(state.probs(*key))
    specs, bins = [], []
    for i in range(n):
        pipe, used = [], []
        for j in range(PIPELINE_LENGTH):
            kind = CTAUGMENT_KINDS[kinds[i, j]]
            vals = []
            for p, param in enumerate(CTAUGMENT_PARAMS[kind]):
                nb = _n_bins(param)
                if uniform_bins:
                    b = min(int(u[i, j, p] * nb), nb - 1)
                else:
                    cdf = cdfs[(kind, p)]
                    b = min(int(np.searchsorted(cdf, u[i, j, p] * cdf[-1], side="right")), nb - 1)
                used.append((kind, p, b))
                vals.append(bin_value(param, b))
            if kind == "Identity":
                spec = TransformSpec(kind)
            elif kind == "Rescale":
                spec = TransformSpec(kind, vals[0], method=RESCALE_METHODS[vals[1]])
            elif kind == "Cutout":
                spec = TransformSpec(kind, vals[0], center=tuple(centers[i, j]))
            else:
                spec = TransformSpec(kind, vals[0])
            pipe.append(spec)
        specs.append(pipe)
        bins.append(used)
    return specs, bins


def cta_sample_batch(state, rng, n, return_bins=False):
    """Weighted CTAugment pipelines; with ``return_bins`` also the bins used."""
    specs, bins = _cta_pipelines(state, rng, n, uniform_bins=False)
    return (specs, bins) if return_bins else specs


def cta_sample(state, rng):
    return cta_sample_batch(state, rng, 1)[0]


def cta_probe_batch(state, rng, n):
    """Pipelines with uniformly drawn bins, for updating the weights."""
    return _cta_pipelines(state, rng, n, uniform_bins=True)


def match_score(model_dist, true_label):
    """1 - half the L1 distance between the prediction and the one-hot label."""
    d = np.asarray(model_dist, dtype=np.float64)
    target = np.zeros_like(d)
    target[int(true_label)] = 1.0
    return 1.0 - 0.5 * np.abs(d - target).sum()


def cta_update(state, sampled_bins, model_dist, true_label):
    """Move each sampled bin's weight toward the prediction's match score."""
    omega = float(np.clip(match_score(model_dist, true_label), 0.0, 1.0))
    rho = state.decay
    for kind, p, b in sampled_bins:
        w = state.weights[(kind, p)]
        w[b] = rho * w[b] + (1.0 - rho) * omega
    return state


# -- strong augmentation ----------------------------------------------------------


def apply_pipelines(imgs, pipelines):
    out = ops.as_batch(imgs)
    for j in range(max((len(p) for p in pipelines), default=0)):
        out = ops.apply_batch(out, [p[j] for p in pipelines])
    return out


def strong_augment_batch(imgs, policy, state, rng):
    """Two sampled transforms per image, then Cutout with L ~ U[0, 0.5]."""
    imgs = ops.as_batch(imgs)
    n = len(imgs)
    if policy == "randaugment":
        pipes = randaugment_sample_batch(rng, n)
    elif policy == "ctaugment":
        if state is None:
            raise ValueError("the ctaugment policy needs a CtaState")
        pipes = cta_sample_batch(state, rng, n)
    else:
        raise ValueError(f"unknown strong policy {policy!r}")
    frac = rng.random(n) * 0.5
    centers = [tuple(c) for c in rng.random((n, 2))]
    out = apply_pipelines(imgs, pipes)
    return ops.cutout(out, frac, centers)


def strong_augment(img, policy, state, rng):
    img = np.asarray(img)
    return strong_augment_batch(img, policy, state, rng)[0].reshape(img.shape)
