"""Pixel-level image transforms on uint8 batches.

Every op takes a batch ``imgs`` of shape ``(N, H, W, C)`` (uint8) and,
where the op is parameterised, a float array of per-image magnitudes of
shape ``(N,)``. Ops never modify their input.

Colour ops follow the PIL ``ImageEnhance``/``ImageOps`` conventions: an
enhancement with factor ``f`` is ``degenerate + f * (img - degenerate)``
rounded and clipped to [0, 255].
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image

FILL = 127

RESCALE_METHODS = ("antialias", "bicubic", "bilinear", "box", "hamming", "nearest")
_PIL_FILTERS = {
    "antialias": Image.Resampling.LANCZOS,
    "bicubic": Image.Resampling.BICUBIC,
    "bilinear": Image.Resampling.BILINEAR,
    "box": Image.Resampling.BOX,
    "hamming": Image.Resampling.HAMMING,
    "nearest": Image.Resampling.NEAREST,
}

# Union of the RandAugment and CTAugment parameter ranges for each kind.
# ``None`` marks kinds without a magnitude; for the blended kinds the
# magnitude is optional and defaults to a full-strength blend.
MAGNITUDE_RANGES = {
    "Autocontrast": (0.0, 1.0),
    "Brightness": (0.0, 1.0),
    "Color": (0.0, 1.0),
    "Contrast": (0.0, 1.0),
    "Cutout": (0.0, 0.5),
    "Equalize": (0.0, 1.0),
    "Invert": (0.0, 1.0),
    "Identity": None,
    "Posterize": (1.0, 8.0),
    "Rescale": (0.5, 1.0),
    "Rotate": (-45.0, 45.0),
    "Sharpness": (0.0, 1.0),
    "ShearX": (-0.3, 0.3),
    "ShearY": (-0.3, 0.3),
    "Smooth": (0.0, 1.0),
    "Solarize": (0.0, 1.0),
    "TranslateX": (-0.3, 0.3),
    "TranslateY": (-0.3, 0.3),
}
KINDS = tuple(MAGNITUDE_RANGES)
_BLENDED = ("Autocontrast", "Equalize", "Invert")


@dataclass(frozen=True)
class TransformSpec:
    """One parameterised transform.

    ``center`` is only read by Cutout: the patch centre as fractions of
    (height, width). Without it the patch is centred in the image.
    """

    kind: str
    magnitude: Optional[float] = None
    method: Optional[str] = None
    center: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        validate_spec(self)


def validate_spec(t):
    if t.kind not in MAGNITUDE_RANGES:
        raise ValueError(f"unknown transform kind {t.kind!r}")
    rng = MAGNITUDE_RANGES[t.kind]
    if rng is None:
        if t.magnitude is not None:
            raise ValueError(f"{t.kind} takes no magnitude")
    elif t.magnitude is None:
        if t.kind not in _BLENDED:
            raise ValueError(f"{t.kind} requires a magnitude")
    else:
        lo, hi = rng
        m = float(t.magnitude)
        if not (lo <= m <= hi):
            raise ValueError(f"{t.kind} magnitude {m} outside [{lo}, {hi}]")
    if t.kind == "Rescale" and (t.method or "nearest") not in RESCALE_METHODS:
        raise ValueError(f"unknown rescale method {t.method!r}")
    if t.center is not None:
        cy, cx = t.center
        if not (0.0 <= cy <= 1.0 and 0.0 <= cx <= 1.0):
            raise ValueError("cutout center must be fractional in [0, 1]")


def as_batch(img):
    """Return ``img`` as an ``(N, H, W, C)`` uint8 batch (adds axes as needed)."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {a.dtype}")
    if a.ndim == 2:
        a = a[None, :, :, None]
    elif a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[3] not in (1, 3) or min(a.shape[1:3]) < 1:
        raise ValueError(f"bad image shape {np.shape(img)}")
    return a


def _finish(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _blend(base, target, factor):
    """``base + factor * (target - base)`` with per-image factors."""
    f = np.asarray(factor, dtype=np.float64).reshape(-1, 1, 1, 1)
    base = np.asarray(base, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return _finish(base + f * (target - base))


def _grayscale(imgs):
    """ITU-R 601-2 luma with PIL's fixed-point rounding; shape (N, H, W, 1)."""
    if imgs.shape[3] == 1:
        return imgs.astype(np.int64)
    x = imgs.astype(np.int64)
    y = (x[..., 0] * 19595 + x[..., 1] * 38470 + x[..., 2] * 7471 + 0x8000) >> 16
    return y[..., None]


# -- colour ops ---------------------------------------------------------------


def identity(imgs):
    return imgs.copy()


def brightness(imgs, factor):
    return _blend(np.zeros_like(imgs, dtype=np.float64), imgs, factor)


def color(imgs, factor):
    if imgs.shape[3] == 1:
        return imgs.copy()
    gray = np.broadcast_to(_grayscale(imgs), imgs.shape)
    return _blend(gray, imgs, factor)


def contrast(imgs, factor):
    gray = _grayscale(imgs)
    mean = np.floor(gray.reshape(len(imgs), -1).mean(axis=1) + 0.5)
    degen = np.broadcast_to(mean.reshape(-1, 1, 1, 1), imgs.shape)
    return _blend(degen, imgs, factor)


def _filter3x3(imgs, kernel):
    """3x3 filter on the interior; border pixels are copied unchanged."""
    x = imgs.astype(np.float64)
    out = x.copy()
    h, w = imgs.shape[1:3]
    if h < 3 or w < 3:
        return out
    acc = np.zeros((len(imgs), h - 2, w - 2, imgs.shape[3]))
    for dy in range(3):
        for dx in range(3):
            acc += kernel[dy, dx] * x[:, dy:dy + h - 2, dx:dx + w - 2]
    out[:, 1:-1, 1:-1] = np.rint(acc / kernel.sum())
    return out


_SMOOTH_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64)
_BOX_KERNEL = np.ones((3, 3), dtype=np.float64)


def sharpness(imgs, factor):
    return _blend(_filter3x3(imgs, _SMOOTH_KERNEL), imgs, factor)


def smooth(imgs, factor):
    return _blend(_filter3x3(imgs, _BOX_KERNEL), imgs, factor)


def _per_channel_lut(imgs, lut):
    """Apply a lookup table of shape (N, C, 256) to each image channel."""
    n, h, w, c = imgs.shape
    idx = imgs.astype(np.int64).transpose(0, 3, 1, 2).reshape(n * c, h * w)
    flat = lut.reshape(n * c, 256)
    out = np.take_along_axis(flat, idx, axis=1)
    return out.reshape(n, c, h, w).transpose(0, 2, 3, 1).astype(np.uint8)


def _autocontrast_full(imgs):
    n, _, _, c = imgs.shape
    flat = imgs.reshape(n, -1, c)
    lo = flat.min(axis=1).astype(np.float64)[..., None]
    hi = flat.max(axis=1).astype(np.float64)[..., None]
    ix = np.arange(256, dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    scale = 255.0 / span
    lut = np.clip(np.trunc(ix * scale - lo * scale), 0, 255)
    lut = np.where(hi > lo, lut, ix)
    return _per_channel_lut(imgs, lut)


def autocontrast(imgs, blend=None):
    target = _autocontrast_full(imgs)
    if blend is None:
        return target
    return _blend(imgs, target, blend)


def _equalize_full(imgs):
    n, h, w, c = imgs.shape
    chan = imgs.transpose(0, 3, 1, 2).reshape(n * c, h * w).astype(np.int64)
    offs = (np.arange(n * c) * 256)[:, None]
    hist = np.bincount((chan + offs).ravel(), minlength=n * c * 256).reshape(n * c, 256)
    last = chan.max(axis=1)
    total = hist.sum(axis=1)
    step = (total - hist[np.arange(n * c), last]) // 255
    nonzero = (hist > 0).sum(axis=1)
    cum = np.cumsum(hist, axis=1) - hist
    safe = np.where(step > 0, step, 1)[:, None]
    lut = np.clip((safe // 2 + cum) // safe, 0, 255)
    keep = ((step == 0) | (nonzero <= 1))[:, None]
    lut = np.where(keep, np.arange(256)[None, :], lut)
    return _per_channel_lut(imgs, lut.reshape(n, c, 256))


def equalize(imgs, blend=None):
    target = _equalize_full(imgs)
    if blend is None:
        return target
    return _blend(imgs, target, blend)


def invert(imgs, blend=None):
    target = 255 - imgs
    if blend is None:
        return target
    return _blend(imgs, target, blend)


def posterize(imgs, bits):
    b = np.rint(np.asarray(bits, dtype=np.float64)).astype(np.int64)
    mask = (0xFF & ~((1 << (8 - b)) - 1)).astype(np.uint8)
    return imgs & mask.reshape(-1, 1, 1, 1)


def solarize(imgs, threshold):
    t = np.asarray(threshold, dtype=np.float64).reshape(-1, 1, 1, 1)
    return np.where(imgs / 255.0 > t, 255 - imgs, imgs).astype(np.uint8)


# -- geometric ops --------------------------------------------------------------


def _affine_sample(imgs, coeffs):
    """Nearest-neighbour inverse warp with gray fill.

    ``coeffs`` has shape (N, 6): for output pixel (y, x), measured from the
    image centre, the source pixel is ``(a*x + b*y + e, c*x + d*y + f)``
    plus the centre again.
    """
    n, h, w, ch = imgs.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs -= cx
    ys -= cy
    a, b, c, d, e, f = (coeffs[:, i].reshape(-1, 1, 1) for i in range(6))
    sx = np.floor(a * xs + b * ys + e + cx + 0.5).astype(np.int64)
    sy = np.floor(c * xs + d * ys + f + cy + 0.5).astype(np.int64)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    flat = imgs.reshape(n, h * w, ch)
    src = np.clip(sy, 0, h - 1) * w + np.clip(sx, 0, w - 1)
    out = np.take_along_axis(flat, src.reshape(n, h * w, 1), axis=1)
    out = out.reshape(n, h, w, ch)
    return np.where(valid[..., None], out, np.uint8(FILL)).astype(np.uint8)


def _coeffs(n, **cols):
    out = np.zeros((n, 6))
    out[:, 0] = 1.0
    out[:, 3] = 1.0
    for name, val in cols.items():
        out[:, "abcdef".index(name)] = val
    return out


def rotate(imgs, degrees):
    """Counter-clockwise rotation about the image centre."""
    th = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    cos, sin = np.cos(th), np.sin(th)
    return _affine_sample(imgs, _coeffs(len(imgs), a=cos, b=-sin, c=sin, d=cos))


def shear_x(imgs, rate):
    return _affine_sample(imgs, _coeffs(len(imgs), b=np.asarray(rate, dtype=np.float64)))


def shear_y(imgs, rate):
    return _affine_sample(imgs, _coeffs(len(imgs), c=np.asarray(rate, dtype=np.float64)))


def shift(imgs, dx, dy):
    """Integer translation by (dx, dy) pixels: right and down are positive."""
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    return _affine_sample(imgs, _coeffs(len(imgs), e=-dx, f=-dy))


def translate_x(imgs, frac):
    w = imgs.shape[2]
    return shift(imgs, np.rint(np.asarray(frac, dtype=np.float64) * w), np.zeros(len(imgs)))


def translate_y(imgs, frac):
    h = imgs.shape[1]
    return shift(imgs, np.zeros(len(imgs)), np.rint(np.asarray(frac, dtype=np.float64) * h))


def hflip(imgs):
    return imgs[:, :, ::-1].copy()


def rescale(imgs, frac, methods):
    """Centre crop of side ``frac * size`` resized back with ``methods[i]``."""
    n, h, w, c = imgs.shape
    out = np.empty_like(imgs)
    mode = "L" if c == 1 else "RGB"
    for i in range(n):
        ch = max(1, int(round(frac[i] * h)))
        cw = max(1, int(round(frac[i] * w)))
        top, left = (h - ch) // 2, (w - cw) // 2
        crop = imgs[i, top:top + ch, left:left + cw]
        pil = Image.fromarray(crop[..., 0] if c == 1 else crop, mode)
        res = np.asarray(pil.resize((w, h), _PIL_FILTERS[methods[i]]))
        out[i] = res.reshape(h, w, c)
    return out


def cutout(imgs, frac, centers=None):
    """Gray square of side ``floor(frac * width)``, clipped at the borders.

    ``centers`` holds fractional (row, col) centres, one per image; ``None``
    centres every patch.
    """
    n, h, w, _ = imgs.shape
    out = imgs.copy()
    sides = np.floor(np.asarray(frac, dtype=np.float64) * w + 1e-9).astype(np.int64)
    for i in range(n):
        s = int(sides[i])
        if s <= 0:
            continue
        if centers is None or centers[i] is None:
            cy, cx = h // 2, w // 2
        else:
            cy = min(int(centers[i][0] * h), h - 1)
            cx = min(int(centers[i][1] * w), w - 1)
        y0, x0 = cy - s // 2, cx - s // 2
        out[i, max(y0, 0):max(y0 + s, 0), max(x0, 0):max(x0 + s, 0)] = FILL
    return out


_DISPATCH = {
    "Autocontrast": autocontrast,
    "Brightness": brightness,
    "Color": color,
    "Contrast": contrast,
    "Equalize": equalize,
    "Invert": invert,
    "Posterize": posterize,
    "Rotate": rotate,
    "Sharpness": sharpness,
    "ShearX": shear_x,
    "ShearY": shear_y,
    "Smooth": smooth,
    "Solarize": solarize,
    "TranslateX": translate_x,
    "TranslateY": translate_y,
}


def apply_batch(imgs, specs):
    """Apply ``specs[i]`` to ``imgs[i]``; images are grouped by kind."""
    imgs = as_batch(imgs)
    if len(specs) != len(imgs):
        raise ValueError("need one TransformSpec per image")
    out = np.empty_like(imgs)
    by_kind = {}
    for i, t in enumerate(specs):
        by_kind.setdefault(t.kind, []).append(i)
    for kind, idx in by_kind.items():
        idx = np.asarray(idx)
        sub = imgs[idx]
        group = [specs[i] for i in idx]
        mags = [t.magnitude for t in group]
        if kind == "Identity":
            res = identity(sub)
        elif kind == "Cutout":
            res = cutout(sub, np.array(mags, dtype=np.float64), [t.center for t in group])
        elif kind == "Rescale":
            res = rescale(sub, mags, [t.method or "nearest" for t in group])
        elif kind in _BLENDED:
            # a missing magnitude means a full-strength blend
            full = np.array([1.0 if m is None else m for m in mags])
            res = _DISPATCH[kind](sub, full)
        else:
            res = _DISPATCH[kind](sub, np.array(mags, dtype=np.float64))
        out[idx] = res
    return out


def apply_transform(img, t):
    """Apply one transform to a single ``(H, W, C)`` image."""
    validate_spec(t)
    img = np.asarray(img)
    batch = as_batch(img)
    return apply_batch(batch, [t])[0].reshape(img.shape)
