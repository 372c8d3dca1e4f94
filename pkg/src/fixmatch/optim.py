"""SGD/Adam with coupled L2 weight decay, learning-rate schedules, and EMA.

Optimizers update parameter arrays in place; their buffers are plain
arrays so they can be checkpointed verbatim.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule over ``total_steps`` steps.

    ``kind`` is ``cosine`` (lr * cos(7 pi k / 16 K)), ``linear`` (from lr
    down to ``end_frac * lr`` at K) or ``constant``.
    """

    kind: str = "cosine"
    lr: float = 0.03
    total_steps: int = 1
    end_frac: float = 1.0 / 3.0

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(schedule, k):
    if not 0 <= k <= schedule.total_steps:
        raise ValueError(f"step {k} outside [0, {schedule.total_steps}]")
    frac = k / schedule.total_steps
    if schedule.kind == "cosine":
        return schedule.lr * math.cos(7.0 * math.pi * k / (16.0 * schedule.total_steps))
    if schedule.kind == "linear":
        return schedule.lr * (1.0 - (1.0 - schedule.end_frac) * frac)
    return schedule.lr


def _check_grads(grads, step):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at step {step}")


class SGD:
    def __init__(self, params, momentum=0.9, nesterov=True):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p) for p in params]
        self.steps = 0

    def step(self, params, grads, lr, weight_decay=0.0):
        _check_grads(grads, self.steps)
        beta = self.momentum
        for p, g, v in zip(params, grads, self.velocity):
            g = g + weight_decay * p if weight_decay else g
            v *= beta
            v += g
            if self.nesterov:
                p -= lr * (beta * v + g)
            else:
                p -= lr * v
        self.steps += 1

    def state_arrays(self):
        return list(self.velocity)

    def load_state_arrays(self, arrays, steps):
        self.velocity = [np.array(a) for a in arrays]
        self.steps = steps


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.steps = 0

    def step(self, params, grads, lr, weight_decay=0.0):
        _check_grads(grads, self.steps)
        self.steps += 1
        t = self.steps
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g + weight_decay * p if weight_decay else g
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        return list(self.m) + list(self.v)

    def load_state_arrays(self, arrays, steps):
        half = len(arrays) // 2
        self.m = [np.array(a) for a in arrays[:half]]
        self.v = [np.array(a) for a in arrays[half:]]
        self.steps = steps


def sgd_step(state, params, grads, lr, weight_decay=0.0):
    state.step(params, grads, lr, weight_decay)
    return params, state


def adam_step(state, params, grads, lr, weight_decay=0.0):
    state.step(params, grads, lr, weight_decay)
    return params, state


class EMA:
    """Exponential moving average of parameters: s <- d*s + (1-d)*p."""

    def __init__(self, params, decay=0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = [np.array(p, dtype=np.float64) for p in params]

    def update(self, params):
        d = self.decay
        for s, p in zip(self.shadow, params):
            if s.shape != p.shape:
                raise ValueError("EMA shadow and parameter shapes differ")
            s *= d
            s += (1.0 - d) * p
        return self


def ema_update(ema, params):
    return ema.update(params)
