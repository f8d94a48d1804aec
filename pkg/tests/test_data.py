import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedunlearn.data import (
    BackdoorSpec,
    Dataset,
    Partition,
    Selector,
    apply_trigger,
    digits_datasets,
    load_idx,
    mark_forget,
    partition_preferential,
    partition_random,
    poison,
    save_idx,
    synth_blobs,
    train_test_split,
    trigger_positions,
    write_digits_idx,
)
from fedunlearn.errors import DataFormatError, ShapeError


def write_pair(tmp_path, img_bytes, lbl_bytes):
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    ip.write_bytes(img_bytes)
    lp.write_bytes(lbl_bytes)
    return ip, lp


def hand_idx():
    images = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 17, 128, 1, 2, 3, 4])
    labels = struct.pack(">II", 0x801, 2) + bytes([3, 7])
    return images, labels


# ---- IDX


def test_load_hand_crafted_idx(tmp_path):
    ds = load_idx(*write_pair(tmp_path, *hand_idx()))
    assert len(ds) == 2 and ds.dim == 4
    np.testing.assert_array_equal(ds.features[0], np.array([0, 255, 17, 128]) / 255.0)
    np.testing.assert_array_equal(ds.features[1], np.array([1, 2, 3, 4]) / 255.0)
    assert ds.labels.tolist() == [3, 7]


def test_load_gzipped_idx(tmp_path):
    images, labels = hand_idx()
    ip, lp = tmp_path / "i.gz", tmp_path / "l.gz"
    ip.write_bytes(gzip.compress(images))
    lp.write_bytes(gzip.compress(labels))
    assert load_idx(ip, lp).labels.tolist() == [3, 7]


def test_labels_with_image_magic_rejected(tmp_path):
    images, labels = hand_idx()
    bad = struct.pack(">II", 0x803, 2) + bytes([3, 7])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(*write_pair(tmp_path, images, bad))


def test_empty_file_is_truncation(tmp_path):
    images, _ = hand_idx()
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(*write_pair(tmp_path, images, b""))


def test_truncated_body(tmp_path):
    images, labels = hand_idx()
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(*write_pair(tmp_path, images[:-1], labels))


def test_count_mismatch(tmp_path):
    images, _ = hand_idx()
    labels = struct.pack(">II", 0x801, 3) + bytes([3, 7, 1])
    with pytest.raises(DataFormatError):
        load_idx(*write_pair(tmp_path, images, labels))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 3, 3), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3, 4])
    save_idx(imgs, labels, tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(np.rint(ds.features * 255).astype(np.uint8), imgs.reshape(5, 9))
    assert (tmp_path / "i").read_bytes()[:16] == struct.pack(">IIII", 0x803, 5, 3, 3)


# ---- dataset basics


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 2), 1.5), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 2)), [0], 2)


def test_synth_blobs_construction():
    ds = synth_blobs(2, 5, 2, 0.01, seed=1)
    assert len(ds) == 10
    assert ds.labels.tolist() == [0] * 5 + [1] * 5
    again = synth_blobs(2, 5, 2, 0.01, seed=1)
    np.testing.assert_array_equal(ds.features, again.features)


def test_synth_blobs_zero_spread_collapses_to_centres():
    ds = synth_blobs(3, 4, 5, 0.0, seed=2)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_train_test_split_disjoint_cover():
    ds = synth_blobs(2, 50, 3, 0.1, seed=0)
    tr, te = train_test_split(ds, 0.7, seed=3)
    assert len(tr) == 70 and len(te) == 30


@pytest.mark.slow
def test_digits_files_match_in_memory(tmp_path):
    pytest.importorskip("sklearn")
    paths = write_digits_idx(tmp_path, copies=2, seed=0)
    tr, te = digits_datasets(copies=2, seed=0)
    a = load_idx(paths["train_images"], paths["train_labels"])
    b = load_idx(paths["test_images"], paths["test_labels"])
    np.testing.assert_array_equal(a.features, tr.features)
    np.testing.assert_array_equal(b.labels, te.labels)
    assert a.image_side == 28
    assert len(tr) == 2 * 1258 and len(te) == 2 * 539
    # blank 2-pixel border on the unjittered copy keeps corners empty
    first = a.features[: len(a) // 2].reshape(-1, 28, 28)
    assert np.all(first[:, :2, :] == 0) and np.all(first[:, :, -2:] == 0)


# ---- partitions


def test_random_partition_even_split():
    ds = synth_blobs(2, 5, 2, 0.1, seed=0)
    part = partition_random(ds, 5, seed=1)
    assert [len(c) for c in part.client_indices] == [2] * 5
    assert sorted(np.concatenate(part.client_indices).tolist()) == list(range(10))
    again = partition_random(ds, 5, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(part.client_indices, again.client_indices))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_random_partition_invariants(n, k, seed):
    if k > n:
        k = n
    ds = Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int), 2)
    part = partition_random(ds, k, seed)
    sizes = [len(c) for c in part.client_indices]
    assert max(sizes) - min(sizes) <= 1
    allidx = np.concatenate(part.client_indices)
    assert len(allidx) == len(set(allidx.tolist())) == n


def test_partition_rejects_overlap():
    with pytest.raises(ValueError):
        Partition([np.array([0, 1]), np.array([1, 2])], np.zeros(3, dtype=bool))


def test_preferential_partition():
    ds = synth_blobs(10, 23, 2, 0.1, seed=0)
    part = partition_preferential(ds, 5, range(5), range(5, 10), seed=4)
    for k, idx in enumerate(part.client_indices):
        labels = ds.labels[idx]
        assert np.sum(labels == 5 + k) == 23
        assert set(labels.tolist()) == {0, 1, 2, 3, 4, 5 + k}
    for c in range(5):
        counts = [np.sum(ds.labels[idx] == c) for idx in part.client_indices]
        assert max(counts) - min(counts) <= 1
    for c in range(5, 10):
        assert sum(np.any(ds.labels[idx] == c) for idx in part.client_indices) == 1


def test_preferential_errors():
    ds = synth_blobs(6, 4, 2, 0.1, seed=0)
    with pytest.raises(ValueError, match="absent"):
        partition_preferential(ds, 5, range(5), range(5, 10), seed=0)
    with pytest.raises(ValueError):
        partition_preferential(ds, 2, (0, 1), (1, 2), seed=0)


def test_mark_forget_selectors():
    ds = synth_blobs(10, 10, 2, 0.1, seed=0)
    part = partition_preferential(ds, 5, range(5), range(5, 10), seed=0)
    by_client = mark_forget(part, Selector.client(2))
    assert by_client.n_forget(2) == len(part.client_indices[2])
    assert all(by_client.n_forget(c) == 0 for c in (0, 1, 3, 4))
    by_class = mark_forget(part, Selector.label(7), ds.labels)
    assert [by_class.n_forget(c) for c in range(5)] == [0, 0, 10, 0, 0]
    none = mark_forget(part, Selector.samples([]))
    assert none.n_target == 0
    n = sum(none.n_forget(c) + none.n_retain(c) for c in range(5))
    assert n == none.n_total == len(ds)


def test_mark_forget_replaces_previous_flags():
    ds = synth_blobs(2, 5, 2, 0.1, seed=0)
    part = partition_random(ds, 2, seed=0)
    a = mark_forget(part, Selector.client(0))
    b = mark_forget(a, Selector.client(1))
    assert b.n_forget(0) == 0 and b.n_forget(1) == len(part.client_indices[1])


# ---- backdoor


def test_trigger_on_blank_image():
    out = apply_trigger(np.zeros((1, 784)), BackdoorSpec())
    img = out.reshape(28, 28)
    assert np.sum(img == 1.0) == 9
    assert np.all(img[:3, -3:] == 1.0)


@pytest.mark.parametrize("corner,rows,cols", [
    ("top-left", slice(0, 3), slice(0, 3)),
    ("bottom-left", slice(25, 28), slice(0, 3)),
    ("bottom-right", slice(25, 28), slice(25, 28)),
])
def test_trigger_corners(corner, rows, cols):
    img = apply_trigger(np.zeros(784), BackdoorSpec(corner=corner)).reshape(28, 28)
    assert np.all(img[rows, cols] == 1.0) and img.sum() == 9


def test_trigger_too_large():
    with pytest.raises(ValueError):
        trigger_positions(4, BackdoorSpec(trigger_size=5))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_trigger_changes_exactly_size_squared_positions(size, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 0.99, (3, 64))
    spec = BackdoorSpec(trigger_size=size)
    out = apply_trigger(x, spec)
    assert np.all((out != x).sum(axis=1) == size * size)
    np.testing.assert_array_equal(apply_trigger(out, spec), out)


def test_poison_touches_only_the_poisoned_client():
    ds = synth_blobs(10, 10, 16, 0.05, seed=0)
    part = partition_random(ds, 4, seed=1)
    spec = BackdoorSpec(trigger_size=2, poisoned_client=1)
    bad = poison(ds, part, spec)
    idx = part.client_indices[1]
    assert np.all(bad.labels[idx] == 9)
    rest = np.setdiff1d(np.arange(len(ds)), idx)
    np.testing.assert_array_equal(bad.features[rest], ds.features[rest])
    np.testing.assert_array_equal(bad.labels[rest], ds.labels[rest])
    again = poison(bad, part, spec)
    np.testing.assert_array_equal(again.features, bad.features)


def test_poison_rejects_target_outside_classes():
    ds = synth_blobs(4, 4, 16, 0.05, seed=0)
    part = partition_random(ds, 2, seed=1)
    with pytest.raises(ValueError):
        poison(ds, part, BackdoorSpec())
