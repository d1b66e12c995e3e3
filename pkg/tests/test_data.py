import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from admmq import nn
from admmq.data import Dataset, blob_means, load_idx, load_mnist, parse_idx, subset, synth_blobs, write_idx
from admmq.errors import DataError

# two 2x3 images and their labels, byte by byte
IMAGES = bytes.fromhex("00000803" "00000002" "00000002" "00000003") + bytes([0, 51, 102, 153, 204, 255, 255, 0, 1, 2, 3, 4])
LABELS = bytes.fromhex("00000801" "00000002") + bytes([7, 3])


def write(tmp_path, images=IMAGES, labels=LABELS, gz=False):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(gzip.compress(images) if gz else images)
    lp.write_bytes(gzip.compress(labels) if gz else labels)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_fixture_pixels(tmp_path, gz):
    ds = load_idx(*write(tmp_path, gz=gz))
    assert ds.images.shape == (2, 1, 2, 3)
    assert ds.images[0, 0].tolist() == [[0.0, 0.2, 0.4], [0.6, 0.8, 1.0]]
    assert ds.images[1, 0, 0].tolist() == [1.0, 0.0, 1 / 255]
    assert ds.labels.tolist() == [7, 3]


def test_labels_with_image_magic_rejected(tmp_path):
    bad = bytes.fromhex("00000803") + LABELS[4:]
    with pytest.raises(DataError, match="byte offset 0"):
        load_idx(*write(tmp_path, labels=bad))


def test_truncated_payload_reports_offset(tmp_path):
    with pytest.raises(DataError, match="byte offset 26"):
        load_idx(*write(tmp_path, images=IMAGES[:-2]))


def test_count_mismatch(tmp_path):
    three = bytes.fromhex("00000801" "00000003") + bytes([1, 2, 3])
    with pytest.raises(DataError, match="byte offset 4"):
        load_idx(*write(tmp_path, labels=three))


def test_trailing_bytes_rejected():
    with pytest.raises(DataError, match="trailing"):
        parse_idx(LABELS + b"\x00", 0x801)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 9), st.integers(1, 9))
def test_idx_round_trip(tmp_path_factory, seed, n, h, w):
    r = np.random.default_rng(seed)
    pixels = r.integers(0, 256, (n, 1, h, w))
    ds = Dataset(pixels / 255.0, r.integers(0, 10, n))
    d = tmp_path_factory.mktemp("idx")
    write_idx(ds, d / "i", d / "l")
    back = load_idx(d / "i", d / "l")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.images.min() >= 0.0 and back.images.max() <= 1.0


def test_subset_full_size_is_permutation():
    ds = synth_blobs(classes=3, n_per_class=20, dim=2, seed=0)
    sub = subset(ds, len(ds), seed=1)
    assert sorted(map(tuple, sub.images.tolist())) == sorted(map(tuple, ds.images.tolist()))


def test_subset_deterministic_and_stratified():
    labels = np.repeat(np.arange(10), 500)
    ds = Dataset(np.arange(5000.0)[:, None], labels)
    a, b = subset(ds, 1000, seed=3), subset(ds, 1000, seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [100] * 10
    assert len(np.unique(a.images)) == 1000


def test_subset_too_large():
    with pytest.raises(DataError):
        subset(synth_blobs(n_per_class=5), 11, seed=0)


def test_blobs_deterministic():
    a = synth_blobs(classes=4, n_per_class=30, dim=3, seed=9)
    b = synth_blobs(classes=4, n_per_class=30, dim=3, seed=9)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_blob_class_mean_within_three_sigma():
    n, sigma = 400, 1.0
    ds = synth_blobs(classes=2, n_per_class=n, dim=2, seed=0, sigma=sigma)
    mean0 = ds.images[ds.labels == 0].mean(axis=0)
    assert np.all(np.abs(mean0 - blob_means(2, 2, 6.0)[0]) < 3 * sigma / np.sqrt(n))


def test_blobs_trainable_to_perfect_accuracy():
    ds = synth_blobs(classes=2, n_per_class=100, dim=2, seed=0, spacing=8.0)
    m = nn.mlp(2, (), 2, seed=0)
    opt = nn.OptimizerState("sgd", 0.1)
    r = np.random.default_rng(0)
    for _ in range(50):
        nn.train_epoch(m, ds, opt, 20, r)
    assert nn.evaluate(m, ds) == 1.0


def test_dataset_is_read_only():
    ds = synth_blobs()
    with pytest.raises(ValueError):
        ds.images[0, 0] = 1.0


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_mnist(tmp_path / "nope")


def test_mnist_files(mnist_path):
    d = load_mnist(mnist_path)
    full = load_idx(*(next(mnist_path.glob(f"train-{k}-*")) for k in ("images", "labels")))
    assert len(full) == 60000 and full.images.shape[2:] == (28, 28)
    assert (len(d["train"]), len(d["val"]), len(d["test"])) == (10000, 5000, 10000)
    assert d["train"].images.min() >= 0 and d["train"].images.max() <= 1
    counts = np.bincount(d["train"].labels)
    assert counts.sum() == 10000 and counts.min() > 800
