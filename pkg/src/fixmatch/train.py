"""One optimization step of a semi-supervised run, and the state it mutates."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .augment import CtaState, cta_probe_batch, cta_update
from .augment.policies import apply_pipelines
from .core import NonFiniteError, one_hot, rng_for
from .data import BatchSampler
from .network import Classifier, images_to_tensor, predict_dist
from .optim import EMA, lr_at
from .ssl import (
    DaState,
    LabeledBatch,
    UnlabeledBatch,
    combine_grads,
    pi_model_loss,
    pseudo_labeling_loss,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)

ALGORITHMS = ("fixmatch", "pseudo_label", "pi_model", "supervised_only")


@dataclass
class TrainState:
    model: Classifier
    ema: EMA
    opt: object
    sampler: BatchSampler
    da: DaState
    cta: Optional[CtaState]
    step: int = 0


@dataclass
class StepRow:
    step: int
    lr: float
    loss_s: float
    loss_u: float
    mask_rate: Optional[float]
    impurity: Optional[float]
    kept: int = 0  # unlabeled examples above the threshold


class NonFiniteLossError(FloatingPointError):
    pass


def probe_cta(state, model, images, labels, rng):
    """Score uniformly sampled pipelines on labeled images and update bin weights."""
    specs, bins = cta_probe_batch(state, rng, len(images))
    probs = predict_dist(model, images_to_tensor(apply_pipelines(images, specs)))
    for used, p, y in zip(bins, probs, labels):
        cta_update(state, used, p, y)
    return state


def _losses(st, split, ssl_cfg, weak_cfg, algorithm, seed):
    k, model = st.step, st.model
    lab, unl = st.sampler.next_indices()
    num_classes = split.labeled.num_classes
    xb = LabeledBatch(split.labeled.images[lab], one_hot(split.labeled.labels[lab], num_classes))
    loss_s, grads_s, _ = supervised_loss(model, xb, weak_cfg, rng_for(seed, "labeled_aug", k))

    loss_u, grads_u, stats = 0.0, None, None
    if algorithm != "supervised_only" and len(unl):
        pool = split.unlabeled
        ub = UnlabeledBatch(pool.images[unl], pool.hidden_labels[unl])
        urng = rng_for(seed, "unlabeled_aug", k)
        if algorithm == "fixmatch":
            loss_u, grads_u, stats = unsupervised_loss(model, ub, ssl_cfg, weak_cfg, st.cta, st.da, urng)
        elif algorithm == "pseudo_label":
            loss_u, grads_u, stats = pseudo_labeling_loss(model, ub.images, ssl_cfg.tau)
        else:
            loss_u, grads_u = pi_model_loss(model, ub.images, weak_cfg, urng, reduction="mean")
    return loss_s, grads_s, loss_u, grads_u, stats, xb, lab, unl


def train_step(st, split, ssl_cfg, weak_cfg, schedule, algorithm, weight_decay, seed):
    """Advance ``st`` by one step in place and return the step's metrics."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    k = st.step
    if k >= schedule.total_steps:
        raise ValueError(f"step {k} is past the schedule's {schedule.total_steps} steps")
    model = st.model
    try:
        loss_s, grads_s, loss_u, grads_u, stats, xb, lab, unl_idx = _losses(st, split, ssl_cfg, weak_cfg, algorithm, seed)
    except NonFiniteError as e:
        raise NonFiniteLossError(f"step {k}: {e}") from None
    loss = total_loss(loss_s, loss_u, ssl_cfg.lambda_u)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at step {k}: loss_s={loss_s} loss_u={loss_u}")

    if st.cta is not None and algorithm == "fixmatch" and ssl_cfg.strong_policy == "ctaugment":
        probe_cta(st.cta, model, xb.images, split.labeled.labels[lab], rng_for(seed, "cta_probe", k))

    grads = grads_s if grads_u is None else combine_grads(grads_s, grads_u, ssl_cfg.lambda_u)
    lr = lr_at(schedule, k)
    st.opt.step(model.params, grads, lr, weight_decay)
    st.ema.update(model.params)
    if ssl_cfg.da_enabled and stats is not None and stats.weak_mean is not None:
        st.da.update(stats.weak_mean)
    st.step = k + 1
    return StepRow(
        k,
        lr,
        loss_s,
        loss_u,
        None if stats is None else stats.mask_rate,
        None if stats is None else stats.impurity,
        0 if stats is None else int(round(stats.mask_rate * len(unl_idx))),
    )
