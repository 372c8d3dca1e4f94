"""Render weak, RandAugment and CTAugment views of glyphs, and watch CTAugment adapt.

Writes demos/out/augment_grid.png. Run: python3 demos/02_augmentations.py
"""

import os

import numpy as np
from PIL import Image

from fixmatch.augment import CtaState, TransformSpec, WeakAugConfig, apply_transform, cta_update
from fixmatch.augment import strong_augment_batch, weak_augment_batch
from fixmatch.core import rng_for
from fixmatch.data import GLYPH_NAMES, synth_glyphs

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

ds = synth_glyphs(1, 8, 32, seed=3)
imgs = ds.images
rng = rng_for(0, "demo")
rows = [
    imgs,
    weak_augment_batch(imgs, WeakAugConfig(flip_enabled=False), rng),
    strong_augment_batch(imgs, "randaugment", None, rng),
    strong_augment_batch(imgs, "ctaugment", CtaState(), rng),
]
grid = np.concatenate([np.concatenate(list(r[..., 0]), axis=1) for r in rows], axis=0)
Image.fromarray(grid).resize((grid.shape[1] * 3, grid.shape[0] * 3), Image.NEAREST).save(os.path.join(OUT, "augment_grid.png"))
print("rows: original, weak, RandAugment, CTAugment; columns:", [GLYPH_NAMES[k] for k in ds.labels])

# Zero-strength parameters leave an image untouched, bit for bit.
img = imgs[0]
for spec in (TransformSpec("Rotate", 0.0), TransformSpec("Brightness", 1.0), TransformSpec("Posterize", 8.0)):
    print(f"{spec.kind:<10} identity holds: {np.array_equal(apply_transform(img, spec), img)}")

# CTAugment learns which magnitudes keep predictions correct. Pretend the model
# fails whenever Rotate uses one of the three largest bins.
state = CtaState()
for _ in range(500):
    for b in range(17):
        correct = b < 14
        cta_update(state, [("Rotate", 0, b)], np.array([1.0, 0.0]) if correct else np.array([0.0, 1.0]), 0)
print("\nRotate bin weights after feedback:\n", np.round(state.weights[("Rotate", 0)], 3))
print("sampling probabilities:\n", np.round(state.probs("Rotate", 0), 3))
