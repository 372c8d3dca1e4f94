"""Probability primitives and keyed random streams.

Tensors are plain float64 numpy arrays. Distributions live along the last
axis, so every function here accepts a single vector or a batch of rows.
"""

import zlib

import numpy as np

PROB_FLOOR = 1e-12


class NonFiniteError(ValueError):
    """Raised when logits contain NaN or infinity."""


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax received non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(p, q):
    """H(p, q) = -sum_i p_i ln q_i, reduced over the last axis.

    ``q`` is clamped to ``PROB_FLOOR`` so that a zero prediction under a
    non-zero target gives a large finite loss rather than ``inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return -(p * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=-1)


def argmax_onehot(q):
    """One-hot at the maximal entry; ties go to the lowest index."""
    q = np.asarray(q)
    if q.shape[-1] == 0:
        raise ValueError("argmax_onehot of an empty distribution")
    idx = q.argmax(axis=-1)
    return np.eye(q.shape[-1], dtype=np.float64)[idx]


def one_hot(labels, num_classes):
    return np.eye(num_classes, dtype=np.float64)[np.asarray(labels, dtype=np.int64)]


def _tag_id(tag):
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


class RngStream:
    """Counter-style keyed random stream.

    The draw sequence is a pure function of ``(root_seed, purpose, epoch,
    index)``: nothing is shared between keys, so streams can be derived in
    any order (or in parallel) without changing what each one produces.
    """

    __slots__ = ("root_seed", "key")

    def __init__(self, root_seed, purpose, epoch=0, index=0):
        self.root_seed = int(root_seed) & 0xFFFFFFFFFFFFFFFF
        self.key = (str(purpose), int(epoch), int(index))

    def generator(self):
        purpose, epoch, index = self.key
        seq = np.random.SeedSequence(
            self.root_seed, spawn_key=(_tag_id(purpose), epoch, index)
        )
        return np.random.Generator(np.random.Philox(seq))

    def child(self, index):
        purpose, epoch, _ = self.key
        return RngStream(self.root_seed, purpose, epoch, index)

    def __repr__(self):
        return f"RngStream(root_seed={self.root_seed}, key={self.key})"


def rng_for(root_seed, purpose, epoch=0, index=0):
    """Shorthand for ``RngStream(...).generator()``."""
    return RngStream(root_seed, purpose, epoch, index).generator()


def rng_draw(stream, n, kind="uniform", high=None):
    """Draw ``n`` values from a fresh generator for ``stream``.

    ``kind`` is one of ``uniform`` (floats in [0, 1)), ``integers`` (in
    [0, high)) or ``permutation`` (of ``range(n)``).
    """
    gen = stream.generator()
    if kind == "uniform":
        return gen.random(n)
    if kind == "integers":
        return gen.integers(0, high, size=n)
    if kind == "permutation":
        return gen.permutation(n)
    raise ValueError(f"unknown draw kind {kind!r}")
