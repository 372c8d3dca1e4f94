"""Build the glyph dataset, store it as IDX, carve a 4-label split and draw batches.

Run: python3 demos/04_data_splits_and_batches.py
"""

import os
import tempfile

import numpy as np

from fixmatch.data import BatchSampler, SplitSpec, load_idx, make_split, read_metadata, synth_glyphs, write_idx, write_metadata

ds = synth_glyphs(n_per_class=500, num_classes=10, size=24, seed=2024)
print(f"{ds.name}: {len(ds)} images of shape {ds.image_shape}, class counts {np.bincount(ds.labels)}")

with tempfile.TemporaryDirectory() as tmp:
    img_path, lab_path, meta_path = (os.path.join(tmp, n) for n in ("images.idx", "labels.idx", "meta.txt"))
    write_idx(ds, img_path, lab_path)
    write_metadata(ds, meta_path)
    back = load_idx(img_path, lab_path, **{k: v for k, v in read_metadata(meta_path).items()})
    print(f"IDX round trip exact: {np.array_equal(back.images, ds.images)}; metadata {read_metadata(meta_path)}")

split = make_split(ds, SplitSpec(labels_per_class=4, fold_seed=0))
pool = split.unlabeled
print(f"labeled: {len(split.labeled)} ({np.bincount(split.labeled.labels)} per class)")
print(f"unlabeled: {len(pool)} images, {int(pool.injected.sum())} of them copies of labeled images")

sampler = BatchSampler(len(split.labeled), len(pool), batch_size=64, mu=7, seed=0)
lab, unl = sampler.next_indices()
print(f"one step draws {len(lab)} labeled and {len(unl)} unlabeled indices")
print(f"the 40-image labeled pool repeats within a batch: {len(set(lab.tolist()))} distinct of {len(lab)}")

seen = set()
steps = 0
while len(seen) < len(pool):
    seen.update(sampler.next_indices()[1].tolist())
    steps += 1
print(f"every unlabeled image visited after {steps} more steps")
