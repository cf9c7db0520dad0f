"""Test data module."""
import struct

import numpy as np
import pytest
from isal import igzip
from lts_qat.common import DataParseError, DataValidationError, DimensionError  # type: ignore
from lts_qat.data import (  # type: ignore
    CIFAR_RECORD,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    LabeledDataset,
    batches_per_epoch,
    epoch_rng,
    iterate_batches,
    load_cifar10_bin,
    load_idx,
    make_synthetic,
    mnist_split,
    normalize_pixels,
    parse_cifar10,
    parse_idx,
)


def _idx_images(count=4, rows=28, cols=28):
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols)
    pixels = (np.arange(count * rows * cols) % 256).astype(np.uint8)
    return header + pixels.tobytes()


def _idx_labels(labels):
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + bytes(labels)


@pytest.fixture(name="mnist_dir")
def fixture_mnist_dir(tmp_path):
    """A four-image MNIST split."""
    (tmp_path / "train-images-idx3-ubyte").write_bytes(_idx_images())
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(_idx_labels([0, 3, 9, 1]))
    return tmp_path


def test_load_idx_shapes(mnist_dir):
    """Four images load as 4 x 1 x 28 x 28 with int64 labels."""
    ds = load_idx(mnist_dir / "train-images-idx3-ubyte", mnist_dir / "train-labels-idx1-ubyte")
    assert ds.images.shape == (4, 1, 28, 28)
    assert ds.images.dtype == np.float32
    assert ds.labels.tolist() == [0, 3, 9, 1]
    assert len(ds) == 4 and ds.sample_shape == (1, 28, 28)
    assert ds.images[0, 0, 0, 0] == pytest.approx(-0.1307 / 0.3081, rel=1e-6)


def test_mnist_split_reads_gzip(tmp_path):
    """A gzipped split is found and inflated."""
    (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(igzip.compress(_idx_images(2)))
    (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(igzip.compress(_idx_labels([5, 6])))
    ds = mnist_split(tmp_path, "test", (0.1307,), (0.3081,))
    assert ds.images.shape == (2, 1, 28, 28)
    assert ds.labels.tolist() == [5, 6]


def test_parse_idx_wrong_magic():
    """A label file read as images names the expected magic."""
    with pytest.raises(DataParseError, match="0x00000803") as info:
        parse_idx(_idx_labels([1, 2]), IDX_IMAGES_MAGIC)
    assert info.value.offset == 0


def test_parse_idx_empty():
    """An empty file is a truncated header."""
    with pytest.raises(DataParseError, match="truncated") as info:
        parse_idx(b"", IDX_IMAGES_MAGIC)
    assert info.value.offset == 0


def test_parse_idx_truncated_payload():
    """Missing pixel bytes are reported at the end of the data."""
    data = _idx_images(2)[:-10]
    with pytest.raises(DataParseError, match="payload") as info:
        parse_idx(data, IDX_IMAGES_MAGIC)
    assert info.value.offset == len(data)


def test_load_idx_label_out_of_range(tmp_path):
    """Label bytes above 9 are rejected."""
    (tmp_path / "img").write_bytes(_idx_images(2))
    (tmp_path / "lbl").write_bytes(_idx_labels([1, 12]))
    with pytest.raises(DataValidationError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def _cifar_records(labels):
    out = bytearray()
    for i, label in enumerate(labels):
        out.append(label)
        out.extend(bytes([i % 256]) * (CIFAR_RECORD - 1))
    return bytes(out)


def test_load_cifar10_two_records(tmp_path):
    """Two records give 2 x 3 x 32 x 32 normalized per channel."""
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(_cifar_records([7, 2]))
    ds = load_cifar10_bin(path)
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [7, 2]
    assert ds.images[0, 1, 0, 0] == pytest.approx(-0.4822 / 0.2435, rel=1e-6)


def test_parse_cifar10_bad_length():
    """A length that is not a whole number of records is a parse error."""
    with pytest.raises(DataParseError) as info:
        parse_cifar10(_cifar_records([1]) + b"\x00" * 10)
    assert info.value.offset == CIFAR_RECORD


def test_parse_cifar10_bad_label():
    """Label byte 10 is out of range."""
    with pytest.raises(DataValidationError, match="record 1"):
        parse_cifar10(_cifar_records([3, 10]))


def test_normalize_pixels_checks():
    """mean/std length and positivity are checked."""
    raw = np.zeros((1, 3, 2, 2), dtype=np.uint8)
    with pytest.raises(DimensionError):
        normalize_pixels(raw, (0.1, 0.2), (1.0, 1.0))
    with pytest.raises(DataValidationError):
        normalize_pixels(raw, (0.0,), (0.0,))
    assert normalize_pixels(raw + 255, (0.5,), (0.5,)).max() == 1.0


def test_make_synthetic_is_deterministic():
    """The seed fixes images and labels; every class appears."""
    a = make_synthetic(40, shape=(1, 4, 4), seed=3)
    b = make_synthetic(40, shape=(1, 4, 4), seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert sorted(set(a.labels.tolist())) == list(range(10))
    assert not np.array_equal(make_synthetic(40, shape=(1, 4, 4), seed=4).images, a.images)


def test_iterate_batches_covers_dataset():
    """Shuffled batches visit every sample once; the last batch may be short."""
    ds = make_synthetic(10, shape=(1, 2, 2))
    batches = list(iterate_batches(ds, 4, epoch_rng(0, 1)))
    assert [len(y) for _, y in batches] == [4, 4, 2]
    seen = np.concatenate([x for x, _ in batches])
    assert sorted(map(tuple, seen.reshape(10, -1).tolist())) == \
        sorted(map(tuple, ds.images.reshape(10, -1).tolist()))
    assert len(list(iterate_batches(ds, 4, max_batches=2))) == 2
    with pytest.raises(ValueError):
        next(iterate_batches(ds, 0))


def test_epoch_rng_reproducible():
    """The same (seed, epoch) reshuffles identically."""
    assert np.array_equal(epoch_rng(1, 2).permutation(20), epoch_rng(1, 2).permutation(20))
    assert not np.array_equal(epoch_rng(1, 2).permutation(20), epoch_rng(1, 3).permutation(20))


def test_batches_per_epoch():
    """Ceil division capped by max_batches."""
    assert batches_per_epoch(10, 4) == 3
    assert batches_per_epoch(10, 4, 2) == 2


def test_dataset_length_mismatch():
    """Images and labels must agree in count."""
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.zeros(3, dtype=np.int64))
