import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixmatch.augment import WeakAugConfig, weak_augment_batch
from fixmatch.core import rng_for
from fixmatch.data import (
    GLYPH_NAMES,
    BatchSampler,
    Dataset,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    SplitSpec,
    load_idx,
    make_split,
    read_metadata,
    sampler_next,
    synth_glyphs,
    write_idx,
    write_metadata,
)


def small_dataset(n=60, L=3, shape=(5, 5, 1), seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.integers(0, 256, (n,) + shape, dtype=np.uint8), np.arange(n) % L, L, "tiny")


# -- IDX -----------------------------------------------------------------------------------


def test_idx_round_trip_is_byte_identical(tmp_path):
    for shape in ((5, 5, 1), (4, 3, 3)):
        ds = small_dataset(shape=shape)
        a, b = tmp_path / "i.idx", tmp_path / "l.idx"
        write_idx(ds, a, b)
        back = load_idx(a, b)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        a2, b2 = tmp_path / "i2.idx", tmp_path / "l2.idx"
        write_idx(back, a2, b2)
        assert a.read_bytes() == a2.read_bytes() and b.read_bytes() == b2.read_bytes()


def test_idx_canonical_layout(tmp_path):
    # hand-built file in the classic digit layout
    imgs = np.arange(2 * 28 * 28, dtype=np.uint32).astype(np.uint8).reshape(2, 28, 28)
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, 2, 28, 28) + imgs.tobytes())
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 1]))
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images.shape == (2, 28, 28, 1)
    np.testing.assert_array_equal(ds.images[..., 0], imgs)
    assert list(ds.labels) == [7, 1] and ds.num_classes == 8


def test_idx_errors_are_distinct(tmp_path):
    ds = small_dataset()
    a, b = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(ds, a, b)
    with pytest.raises(IdxMagicError):
        load_idx(b, b)  # labels file where images belong
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">II", 0x802, 3) + b"\x00\x00\x00")
    with pytest.raises(IdxMagicError):
        load_idx(a, bad)
    trunc = tmp_path / "trunc"
    trunc.write_bytes(a.read_bytes()[:-10])
    with pytest.raises(IdxTruncatedError):
        load_idx(trunc, b)
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">II", 0x801, 5) + bytes(5))
    with pytest.raises(IdxCountMismatchError):
        load_idx(a, short)
    assert len({IdxMagicError, IdxTruncatedError, IdxCountMismatchError}) == 3


def test_metadata_round_trip(tmp_path):
    ds = small_dataset()
    ds.flip_enabled = False
    path = tmp_path / "meta.txt"
    write_metadata(ds, path)
    meta = read_metadata(path)
    assert meta == {"name": "tiny", "num_classes": 3, "flip_enabled": False}


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 3, 1), np.uint8), [0, 5], 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 3, 1), np.uint8), [0], 3)


# -- glyphs -----------------------------------------------------------------------------------


def test_glyphs_deterministic_and_balanced():
    a = synth_glyphs(100, 10, 24, seed=3)
    b = synth_glyphs(100, 10, 24, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert len(a) == 1000 and np.all(np.bincount(a.labels) == 100)
    assert a.images.shape == (1000, 24, 24, 1)
    assert not a.flip_enabled
    assert not np.array_equal(synth_glyphs(100, 10, 24, seed=4).images, a.images)


def test_glyph_catalogue():
    assert len(GLYPH_NAMES) >= 10
    with pytest.raises(ValueError):
        synth_glyphs(2, len(GLYPH_NAMES) + 1)


def test_glyph_classes_are_distinguishable_by_a_template_matcher():
    # jitter keeps a class-mean matcher well short of a CNN, but above chance (0.1)
    ds = synth_glyphs(60, 10, 24, seed=1)
    x = ds.images.reshape(len(ds), -1).astype(float)
    x = (x - x.mean(axis=1, keepdims=True)) / (x.std(axis=1, keepdims=True) + 1e-9)
    train, test = slice(0, 400), slice(400, None)
    means = np.stack([x[train][ds.labels[train] == k].mean(axis=0) for k in range(10)])
    pred = (x[test] @ means.T).argmax(axis=1)
    assert (pred == ds.labels[test]).mean() > 0.15


def test_glyph_class_survives_weak_augmentation():
    ds = synth_glyphs(20, 10, 24, seed=2)
    out = weak_augment_batch(ds.images, WeakAugConfig(flip_enabled=False), rng_for(0, "w"))
    # a shift keeps the bright stroke mass inside the frame
    bright_before = (ds.images > 128).sum(axis=(1, 2, 3))
    bright_after = (out > 128).sum(axis=(1, 2, 3))
    assert np.median(bright_after / np.maximum(bright_before, 1)) > 0.9


# -- splits ---------------------------------------------------------------------------------


def test_split_sizes_and_partition():
    ds = synth_glyphs(30, 10, 12, seed=0)
    sp = make_split(ds, SplitSpec(4, fold_seed=5))
    assert len(sp.labeled) == 40
    assert np.all(np.bincount(sp.labeled.labels) == 4)
    pool = sp.unlabeled
    assert len(pool) == len(ds)
    plain = pool.source_index[~pool.injected]
    assert len(np.intersect1d(plain, sp.labeled_index)) == 0
    assert np.array_equal(np.sort(np.concatenate([plain, sp.labeled_index])), np.arange(len(ds)))
    np.testing.assert_array_equal(np.sort(pool.source_index[pool.injected]), np.sort(sp.labeled_index))
    np.testing.assert_array_equal(pool.hidden_labels, ds.labels[pool.source_index])


def test_split_without_injection_and_replay():
    ds = synth_glyphs(30, 10, 12, seed=0)
    a = make_split(ds, SplitSpec(2, 1, include_labeled_in_unlabeled=False))
    b = make_split(ds, SplitSpec(2, 1, include_labeled_in_unlabeled=False))
    assert len(a.unlabeled) == len(ds) - 20 and not a.unlabeled.injected.any()
    np.testing.assert_array_equal(a.labeled_index, b.labeled_index)
    c = make_split(ds, SplitSpec(2, 2))
    assert not np.array_equal(a.labeled_index, c.labeled_index)


def test_split_infeasible():
    with pytest.raises(ValueError):
        make_split(synth_glyphs(3, 10, 12), SplitSpec(4))
    with pytest.raises(ValueError):
        SplitSpec(0)


# -- sampler --------------------------------------------------------------------------------


def test_sampler_sizes():
    s = BatchSampler(40, 5000, 64, 7, seed=0)
    lab, unl = s.next_indices()
    assert len(lab) == 64 and len(unl) == 448


def test_small_labeled_pool_repeats_from_reshuffled_cycles():
    s = BatchSampler(40, 100, 64, 1, seed=1)
    lab, _ = s.next_indices()
    first, second = lab[:40], lab[40:]
    assert sorted(first) == list(range(40))
    assert len(set(second)) == 24
    lab2, _ = s.next_indices()
    assert not np.array_equal(np.concatenate([lab, lab2])[40:80], first)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 50), st.integers(1, 300), st.integers(1, 8), st.integers(1, 4), st.integers(0, 100))
def test_unlabeled_epoch_touches_each_example_once(n_lab, n_unl, b, mu, seed):
    s = BatchSampler(n_lab, n_unl, b, mu, seed)
    seen = []
    while len(seen) < n_unl:
        seen.extend(s.next_indices()[1])
    assert sorted(seen[:n_unl]) == list(range(n_unl))


def test_sampler_replay_and_state():
    a = BatchSampler(40, 500, 16, 3, seed=9)
    b = BatchSampler(40, 500, 16, 3, seed=9)
    for _ in range(30):
        x, y = a.next_indices(), b.next_indices()
        np.testing.assert_array_equal(x[0], y[0])
        np.testing.assert_array_equal(x[1], y[1])
    c = BatchSampler(40, 500, 16, 3, seed=9)
    c.load_state(a.state())
    for _ in range(5):
        np.testing.assert_array_equal(a.next_indices()[1], c.next_indices()[1])


def test_sampler_next_builds_batches():
    ds = synth_glyphs(10, 4, 8, seed=0)
    sp = make_split(ds, SplitSpec(2, 0))
    s = BatchSampler(len(sp.labeled), len(sp.unlabeled), 5, 2, seed=0)
    (xi, xl), (ui, uh) = sampler_next(s, sp)
    assert xi.shape == (5, 8, 8, 1) and xl.shape == (5,)
    assert ui.shape == (10, 8, 8, 1) and uh.shape == (10,)


def test_sampler_rejects_empty_pools():
    with pytest.raises(ValueError):
        BatchSampler(0, 10, 4, 1, 0)
