"""Datasets, labeled/unlabeled splits, and the labeled/unlabeled batch sampler."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import rng_for


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"
    flip_enabled: bool = True

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx, name=None):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name, self.flip_enabled)


# -- IDX -------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_IMAGES_RGB = 0x00000804
IDX_LABELS = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_idx(path, allowed):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the IDX magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in allowed:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x} not in {[hex(m) for m in allowed]}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims))
    if len(buf) - head < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(buf) - head}")
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=head)
    return data.reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, name="idx", flip_enabled=True):
    images = _read_idx(images_path, (IDX_IMAGES, IDX_IMAGES_RGB))
    labels = _read_idx(labels_path, (IDX_LABELS,)).astype(np.int64)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(images.copy(), labels, num_classes, name, flip_enabled)


def write_idx(ds, images_path, labels_path):
    imgs = ds.images
    if imgs.shape[3] == 1:
        magic, dims = IDX_IMAGES, imgs.shape[:3]
        payload = imgs[..., 0]
    else:
        magic, dims = IDX_IMAGES_RGB, imgs.shape
        payload = imgs
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims))
        f.write(np.ascontiguousarray(payload).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS, len(ds.labels)))
        f.write(ds.labels.astype(np.uint8).tobytes())


def write_metadata(ds, path):
    with open(path, "w") as f:
        f.write(f"name = {ds.name}\n")
        f.write(f"num_classes = {ds.num_classes}\n")
        f.write(f"flip_enabled = {str(ds.flip_enabled).lower()}\n")


def read_metadata(path):
    meta = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    out = {"name": meta.get("name", "dataset")}
    if "num_classes" in meta:
        out["num_classes"] = int(meta["num_classes"])
    if "flip_enabled" in meta:
        out["flip_enabled"] = meta["flip_enabled"].lower() in ("1", "true", "yes")
    return out


# -- synthetic glyphs ------------------------------------------------------------------


def _seg(u, v, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(u - ax - t * dx, v - ay - t * dy)


def _polyline(u, v, pts):
    return np.minimum.reduce([_seg(u, v, pts[i], pts[i + 1]) for i in range(len(pts) - 1)])


def _triangle(u, v, pts):
    # zero inside, distance to the boundary outside
    edge = _polyline(u, v, pts + pts[:1])
    (x0, y0), (x1, y1), (x2, y2) = pts
    d0 = (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0)
    d1 = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1)
    d2 = (x0 - x2) * (v - y2) - (y0 - y2) * (u - x2)
    inside = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    return np.where(inside, 0.0, edge)


# Each shape maps glyph-frame coordinates (u, v), roughly in [-1, 1], to a
# distance from the stroke (zero inside filled shapes).
GLYPHS = {
    "bars_h": lambda u, v: np.minimum.reduce([_seg(u, v, (-0.8, y), (0.8, y)) for y in (-0.6, 0.0, 0.6)]),
    "bars_v": lambda u, v: np.minimum.reduce([_seg(u, v, (x, -0.8), (x, 0.8)) for x in (-0.6, 0.0, 0.6)]),
    "plus": lambda u, v: np.minimum(_seg(u, v, (-0.9, 0), (0.9, 0)), _seg(u, v, (0, -0.9), (0, 0.9))),
    "cross_x": lambda u, v: np.minimum(_seg(u, v, (-0.7, -0.7), (0.7, 0.7)), _seg(u, v, (-0.7, 0.7), (0.7, -0.7))),
    "ring": lambda u, v: np.abs(np.hypot(u, v) - 0.75),
    "disk": lambda u, v: np.maximum(np.hypot(u, v) - 0.7, 0.0),
    "square": lambda u, v: np.abs(np.maximum(np.abs(u), np.abs(v)) - 0.7),
    "wedge": lambda u, v: _triangle(u, v, [(0.0, -0.85), (0.8, 0.7), (-0.8, 0.7)]),
    "dots": lambda u, v: np.maximum(
        np.minimum.reduce([np.hypot(u - x, v - y) for x in (-0.5, 0.5) for y in (-0.5, 0.5)]) - 0.2, 0.0
    ),
    "zigzag": lambda u, v: _polyline(u, v, [(-0.9, 0.4), (-0.45, -0.4), (0.0, 0.4), (0.45, -0.4), (0.9, 0.4)]),
    "corner": lambda u, v: _polyline(u, v, [(-0.6, -0.8), (-0.6, 0.6), (0.7, 0.6)]),
    "tee": lambda u, v: np.minimum(_seg(u, v, (-0.8, -0.6), (0.8, -0.6)), _seg(u, v, (0, -0.6), (0, 0.9))),
}
GLYPH_NAMES = tuple(GLYPHS)


def render_glyphs(shape, n, size, rng):
    """Render ``n`` jittered copies of one glyph shape as (n, size, size, 1) uint8."""
    fn = GLYPHS[shape]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    cx = c + rng.uniform(-0.12, 0.12, n) * size
    cy = c + rng.uniform(-0.12, 0.12, n) * size
    scale = rng.uniform(0.22, 0.36, n) * size  # pixels per glyph unit
    theta = np.deg2rad(rng.uniform(-15.0, 15.0, n))
    width = rng.uniform(1.0, 2.6, n)  # stroke width in pixels
    fg = rng.uniform(140.0, 255.0, n)
    bg = rng.uniform(0.0, 100.0, n)
    noise = rng.uniform(4.0, 24.0, n)
    grad = rng.uniform(-25.0, 25.0, (n, 2))

    r = lambda a: a.reshape(-1, 1, 1)
    dx, dy = xs[None] - r(cx), ys[None] - r(cy)
    cos, sin = r(np.cos(theta)), r(np.sin(theta))
    u = (cos * dx + sin * dy) / r(scale)
    v = (-sin * dx + cos * dy) / r(scale)
    dist_px = fn(u, v) * r(scale)
    cover = np.clip(r(width) / 2.0 - dist_px + 0.5, 0.0, 1.0)
    back = r(bg) + r(grad[:, 0]) * (xs[None] / size - 0.5) + r(grad[:, 1]) * (ys[None] / size - 0.5)
    img = back + cover * (r(fg) - back) + r(noise) * rng.standard_normal((n, size, size))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)[..., None]


def synth_glyphs(n_per_class, num_classes=10, size=24, seed=0, name="glyphs"):
    """Balanced synthetic dataset of rendered glyph shapes.

    Flip augmentation is switched off in the dataset metadata, since several
    glyphs are mirror-asymmetric.
    """
    if num_classes > len(GLYPHS):
        raise ValueError(f"only {len(GLYPHS)} glyph shapes are defined")
    images, labels = [], []
    for k in range(num_classes):
        rng = rng_for(seed, "glyphs", 0, k)
        images.append(render_glyphs(GLYPH_NAMES[k], n_per_class, size, rng))
        labels.append(np.full(n_per_class, k))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = rng_for(seed, "glyph_order").permutation(len(labels))
    return Dataset(images[order], labels[order], num_classes, name, flip_enabled=False)


# -- splits --------------------------------------------------------------------------


@dataclass
class SplitSpec:
    labels_per_class: int = 4
    fold_seed: int = 0
    include_labeled_in_unlabeled: bool = True

    def __post_init__(self):
        if self.labels_per_class < 1:
            raise ValueError("labels_per_class must be >= 1")


@dataclass
class UnlabeledPool:
    """Unlabeled images. ``hidden_labels`` feed diagnostics only."""

    images: np.ndarray
    hidden_labels: np.ndarray
    source_index: np.ndarray  # index into the original dataset
    injected: np.ndarray  # True for copies of labeled examples

    def __len__(self):
        return len(self.images)


@dataclass
class Split:
    labeled: Dataset
    unlabeled: UnlabeledPool
    labeled_index: np.ndarray = field(default=None)


def make_split(ds, spec):
    rng = rng_for(spec.fold_seed, "split")
    chosen = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        if len(members) < spec.labels_per_class:
            raise ValueError(f"class {k} has {len(members)} examples, need {spec.labels_per_class}")
        chosen.append(np.sort(rng.choice(members, spec.labels_per_class, replace=False)))
    lab_idx = np.concatenate(chosen)
    rest = np.setdiff1d(np.arange(len(ds)), lab_idx)
    unl_idx = np.concatenate([rest, lab_idx]) if spec.include_labeled_in_unlabeled else rest
    injected = np.zeros(len(unl_idx), dtype=bool)
    if spec.include_labeled_in_unlabeled:
        injected[len(rest):] = True
    pool = UnlabeledPool(ds.images[unl_idx], ds.labels[unl_idx], unl_idx, injected)
    return Split(ds.subset(lab_idx, ds.name + "/labeled"), pool, lab_idx)


# -- sampler ---------------------------------------------------------------------------


class BatchSampler:
    """Emits B labeled and mu*B unlabeled indices per step.

    Both pools are consumed as an endless stream of per-epoch permutations
    keyed by (seed, pool, epoch); the labeled pool therefore cycles with a
    fresh shuffle each pass, and every unlabeled example is visited exactly
    once per unlabeled epoch. The stream position is the whole state.
    """

    def __init__(self, n_labeled, n_unlabeled, batch_size, mu, seed):
        if n_labeled < 1 or (mu > 0 and n_unlabeled < 1):
            raise ValueError("sampler pools must be non-empty")
        self.n_labeled, self.n_unlabeled = n_labeled, n_unlabeled
        self.batch_size, self.mu, self.seed = batch_size, mu, seed
        self.labeled_pos = 0
        self.unlabeled_pos = 0
        self._perm_cache = {}

    def _perm(self, purpose, size, epoch):
        key = (purpose, epoch)
        if key not in self._perm_cache:
            if len(self._perm_cache) > 8:
                self._perm_cache.clear()
            self._perm_cache[key] = rng_for(self.seed, purpose, epoch).permutation(size)
        return self._perm_cache[key]

    def _take(self, purpose, size, start, count):
        out = np.empty(count, dtype=np.int64)
        i = 0
        while i < count:
            epoch, off = divmod(start + i, size)
            m = min(size - off, count - i)
            out[i:i + m] = self._perm(purpose, size, epoch)[off:off + m]
            i += m
        return out

    def next_indices(self):
        b, ub = self.batch_size, self.mu * self.batch_size
        lab = self._take("labeled_shuffle", self.n_labeled, self.labeled_pos, b)
        unl = self._take("unlabeled_shuffle", self.n_unlabeled, self.unlabeled_pos, ub) if ub else np.empty(0, np.int64)
        self.labeled_pos += b
        self.unlabeled_pos += ub
        return lab, unl

    def state(self):
        return (self.labeled_pos, self.unlabeled_pos)

    def load_state(self, state):
        self.labeled_pos, self.unlabeled_pos = (int(s) for s in state)


def sampler_next(sampler, split):
    """Next (labeled images, labels), (unlabeled images, hidden labels)."""
    lab, unl = sampler.next_indices()
    pool = split.unlabeled
    return (
        (split.labeled.images[lab], split.labeled.labels[lab]),
        (pool.images[unl], pool.hidden_labels[unl]),
    )
