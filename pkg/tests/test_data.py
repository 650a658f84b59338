from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oshx.data import (
    ClassLabel, DatasetManifest, DecodeError, NoSamplesError, NormStats, Sample, apply_normalization,
    compute_class_weights, compute_normalization, decode_and_resize, decode_raw, encode_raw, load_manifest,
    make_batches, manifest_from_arrays, read_manifest, save_manifest, split_sizes, split_stratified, synth_generate,
    task_samples,
)
from oshx.tensor import make_rng

TCIA_COUNTS = {ClassLabel.NT: 536, ClassLabel.NVT: 263, ClassLabel.VT: 292, ClassLabel.NVR: 53}


def counted_manifest(counts, side=8, seed=0) -> DatasetManifest:
    tile = np.zeros((side, side, 3), dtype=np.uint8)
    labels = [int(c) for c, n in counts.items() for _ in range(n)]
    return manifest_from_arrays([tile] * len(labels), labels, seed=seed)


def floor_rule(n):
    """Integer-only restatement of the 60/15/25 floor rule."""
    train = n * 60 // 100
    val = n * 15 // 100
    return train, val, n - train - val


# -- enumeration and decoding ------------------------------------------------------

def test_load_manifest_counts(tmp_path):
    synth_generate(tmp_path, per_class=2, side=16)
    manifest = load_manifest(tmp_path)
    assert len(manifest.samples) == 8
    assert set(manifest.class_counts.values()) == {2}
    ids = [s.id for s in manifest.samples]
    assert ids == sorted(ids)


def test_load_manifest_empty_tree(tmp_path):
    for c in ClassLabel:
        (tmp_path / c.name).mkdir()
    with pytest.raises(NoSamplesError):
        load_manifest(tmp_path)


def test_load_manifest_skips_undecodable(tmp_path):
    synth_generate(tmp_path, per_class=2, side=16)
    (tmp_path / "VT" / "broken.png").write_bytes(b"not an image")
    manifest = load_manifest(tmp_path)
    assert len(manifest.samples) == 8


def test_decode_large_image_to_model_side(tmp_path):
    path = tmp_path / "big.jpg"
    Image.fromarray(make_rng(0).integers(0, 256, (768, 1024, 3), dtype=np.uint8)).save(path)
    px = decode_and_resize(Sample("big", ClassLabel.NT, path=str(path)), 128)
    assert px.shape == (3, 128, 128) and px.dtype == np.float32
    assert 0.0 <= px.min() and px.max() <= 1.0


def test_decode_mid_gray(tmp_path):
    path = tmp_path / "gray.png"
    Image.fromarray(np.full((40, 30, 3), 128, dtype=np.uint8)).save(path)
    px = decode_and_resize(Sample("g", ClassLabel.NT, path=str(path)), 32)
    assert np.all(np.abs(px - 0.5) <= 1 / 255)


def test_decode_grayscale_png_to_rgb(tmp_path):
    path = tmp_path / "mono.png"
    Image.fromarray(np.full((16, 16), 200, dtype=np.uint8)).save(path)
    assert decode_and_resize(Sample("m", ClassLabel.NT, path=str(path)), 16).shape == (3, 16, 16)


def test_raw_roundtrip():
    px = make_rng(2).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    back = decode_raw(encode_raw(px))
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, px)


def test_raw_rejects_bad_blobs():
    blob = encode_raw(np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(DecodeError):
        decode_raw(b"JUNK" + blob[4:])
    with pytest.raises(DecodeError):
        decode_raw(blob[:-1])


def test_decode_error_names_path(tmp_path):
    path = tmp_path / "bad.png"
    path.write_bytes(b"\x89PNG garbage")
    with pytest.raises(DecodeError, match="bad.png"):
        decode_and_resize(Sample("b", ClassLabel.NT, path=str(path)), 16)


# -- splits ----------------------------------------------------------------------

def test_tcia_split_sizes():
    manifest = split_stratified(counted_manifest(TCIA_COUNTS), seed=0)
    for c, n in TCIA_COUNTS.items():
        got = tuple(manifest.split_counts(s)[c] for s in ("train", "val", "test"))
        assert got == floor_rule(n) == split_sizes(n)
    assert floor_rule(536) == (321, 80, 135)
    assert floor_rule(53) == (31, 7, 15)


def test_split_is_deterministic_and_seed_dependent():
    base = counted_manifest(TCIA_COUNTS)
    a = [s.split for s in split_stratified(base, seed=3).samples]
    b = [s.split for s in split_stratified(base, seed=3).samples]
    c = [s.split for s in split_stratified(base, seed=4).samples]
    assert a == b and a != c


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        split_stratified(counted_manifest({ClassLabel.NT: 5}), fractions=(0.5, 0.5, 0.5))


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(3, 120), min_size=4, max_size=4), seed=st.integers(0, 2**32 - 1))
def test_split_partitions_each_class(counts, seed):
    manifest = split_stratified(counted_manifest(dict(zip(ClassLabel, counts))), seed=seed)
    ids = {name: {s.id for s in manifest.split(name)} for name in ("train", "val", "test")}
    assert set.union(*ids.values()) == {s.id for s in manifest.samples}
    assert sum(len(v) for v in ids.values()) == len(manifest.samples)
    for c, n in zip(ClassLabel, counts):
        sizes = [manifest.split_counts(s)[c] for s in ("train", "val", "test")]
        # floor on train and val: each is short by under one sample, so test can gain up to two
        for got, frac, slack in zip(sizes, (0.60, 0.15, 0.25), (1, 1, 2)):
            assert abs(got - frac * n) < slack


# -- class weights -------------------------------------------------------------------

def test_tcia_class_weights():
    manifest = split_stratified(counted_manifest(TCIA_COUNTS), fractions=(1.0, 0.0, 0.0))
    w = compute_class_weights(manifest, list(ClassLabel))
    want = {c: 1144 / (4 * n) for c, n in TCIA_COUNTS.items()}
    assert w == pytest.approx(want, rel=1e-12)
    assert [round(w[c], 4) for c in ClassLabel] == [0.5336, 1.0875, 0.9795, 5.3962]


def test_equal_counts_give_unit_weights():
    manifest = split_stratified(counted_manifest({c: 20 for c in ClassLabel}))
    assert set(compute_class_weights(manifest, list(ClassLabel)).values()) == {1.0}


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(5, 200), min_size=2, max_size=4))
def test_weights_balance_total(counts):
    classes = list(ClassLabel)[:len(counts)]
    manifest = split_stratified(counted_manifest(dict(zip(classes, counts))))
    train = manifest.split_counts("train")
    w = compute_class_weights(manifest, classes)
    assert all(v > 0 for v in w.values())
    total = sum(train[c] for c in classes)
    assert sum(w[c] * train[c] for c in classes) == pytest.approx(total, rel=1e-12)


# -- normalization -------------------------------------------------------------------

def test_constant_train_set_normalizes_to_zero():
    manifest = split_stratified(manifest_from_arrays([np.full((8, 8, 3), 77, np.uint8)] * 12, [0, 1, 2, 3] * 3))
    stats = compute_normalization(manifest, 8)
    px = manifest.pixels(manifest.split("train")[0], 8)
    assert np.all(apply_normalization(px, stats) == 0)


def test_normalized_train_split_statistics(synth8):
    manifest = split_stratified(load_manifest(synth8))
    manifest = manifest.replace(normalization_stats=compute_normalization(manifest, 32))
    px = np.concatenate([b.pixels.data for b in make_batches(manifest, "train", 16, side=32)]).astype(np.float64)
    assert np.all(np.abs(px.mean(axis=(0, 2, 3))) < 1e-3)
    assert np.all(np.abs(px.std(axis=(0, 2, 3)) - 1) < 1e-3)


def test_manifest_roundtrip(tmp_path, synth8):
    manifest = split_stratified(load_manifest(synth8), seed=5)
    manifest = manifest.replace(normalization_stats=NormStats((0.1, 0.2, 0.3), (0.4, 0.5, 0.6000000000000001)))
    save_manifest(manifest, tmp_path / "m.json")
    back = read_manifest(tmp_path / "m.json")
    assert back == manifest
    assert back.normalization_stats == manifest.normalization_stats


def test_in_memory_manifest_roundtrip(tmp_path):
    imgs = [make_rng(i).integers(0, 256, (8, 8, 3), dtype=np.uint8) for i in range(4)]
    manifest = split_stratified(manifest_from_arrays(imgs, [0, 1, 2, 3]))
    save_manifest(manifest, tmp_path / "m.json")
    back = read_manifest(tmp_path / "m.json")
    for a, b in zip(manifest.samples, back.samples):
        np.testing.assert_array_equal(a.pixels, b.pixels)


# -- batching -------------------------------------------------------------------------

def test_batch_count_for_tcia_sized_set():
    manifest = split_stratified(counted_manifest(TCIA_COUNTS))
    sizes = [len(b.labels) for b in make_batches(manifest, "all", 32, side=8)]
    assert sizes == [32] * 35 + [24]


def test_unshuffled_order_is_manifest_order(synth8):
    manifest = split_stratified(load_manifest(synth8))
    got = [i for b in make_batches(manifest, "val", 3, side=16) for i in b.ids]
    assert got == [s.id for s in manifest.split("val")]


def test_epoch_orders_differ_but_cover_split(synth8):
    manifest = split_stratified(load_manifest(synth8))
    epochs = [[i for b in make_batches(manifest, "train", 5, shuffle=True, seed=[0, e], side=16) for i in b.ids]
              for e in (1, 2)]
    assert epochs[0] != epochs[1]
    assert Counter(epochs[0]) == Counter(epochs[1]) == Counter(s.id for s in manifest.split("train"))


def test_task_classes_are_remapped(synth8):
    manifest = split_stratified(load_manifest(synth8))
    classes = (ClassLabel.NT, ClassLabel.VT)
    labels = np.concatenate([b.labels for b in make_batches(manifest, "train", 4, side=16, classes=classes)])
    assert set(labels) == {0, 1}
    assert len(labels) == len(task_samples(manifest, "train", classes))


def test_augmentation_never_touches_eval_splits(synth8):
    manifest = split_stratified(load_manifest(synth8))
    for split in ("val", "test"):
        plain = [b.pixels.data for b in make_batches(manifest, split, 4, side=16)]
        aug = [b.pixels.data for b in make_batches(manifest, split, 4, side=16, augment=True, seed=3)]
        for a, b in zip(plain, aug):
            np.testing.assert_array_equal(a, b)


def test_augmentation_only_flips(synth8):
    manifest = split_stratified(load_manifest(synth8))
    plain = np.concatenate([b.pixels.data for b in make_batches(manifest, "train", 32, side=16)])
    aug = np.concatenate([b.pixels.data for b in make_batches(manifest, "train", 32, side=16, augment=True, seed=1)])
    flipped = 0
    for p, a in zip(plain, aug):
        variants = [p, p[:, :, ::-1], p[:, ::-1, :], p[:, ::-1, ::-1]]
        match = [np.array_equal(a, v) for v in variants]
        assert any(match)
        flipped += not match[0]
    assert flipped > 0


def test_bad_batch_size():
    with pytest.raises(ValueError):
        next(make_batches(counted_manifest({ClassLabel.NT: 3}), "all", 0, side=8))


# -- synthetic generator -------------------------------------------------------------

def test_synth_file_count(tmp_path):
    paths = synth_generate(tmp_path, per_class=16, side=32)
    assert len(paths) == 64
    assert sorted(p.name for p in tmp_path.iterdir()) == ["NT", "NVR", "NVT", "VT"]


@pytest.mark.parametrize("fmt", ["png", "raw"])
def test_synth_is_deterministic(tmp_path, fmt):
    a = synth_generate(tmp_path / "a", per_class=3, side=24, seed=9, fmt=fmt)
    b = synth_generate(tmp_path / "b", per_class=3, side=24, seed=9, fmt=fmt)
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
