"""Dataset containers: IDX (MNIST), CIFAR-10 binary and a synthetic set."""
# pylint: disable=W1203
import logging
import struct
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from isal import igzip_threaded
from pydantic import ConfigDict
from pydantic.dataclasses import dataclass

from lts_qat.common import DataParseError, DataValidationError, DimensionError

logger = logging.getLogger("lts-qat.data")

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class LabeledDataset:
    """Normalized images N x C x H x W and integer labels."""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        """C x H x W of one image."""
        return tuple(self.images.shape[1:])

    def take(self, count: int) -> "LabeledDataset":
        """First ``count`` samples."""
        return LabeledDataset(self.images[:count], self.labels[:count], self.num_classes)


def read_bytes(path: Union[str, Path], threads: int = 2) -> bytes:
    """Whole file contents; ``.gz`` files are inflated with isal."""
    path = Path(path)
    if path.suffix == ".gz":
        with igzip_threaded.open(path, "rb", threads=threads) as f:
            return f.read()
    return path.read_bytes()


def _resolve(path: Path) -> Path:
    """``path`` itself or its ``.gz`` sibling."""
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gz
    # a few mirrors ship "train-images.idx3-ubyte"
    dotted = path.with_name(path.name.replace("-idx", ".idx"))
    if dotted.exists():
        return dotted
    raise FileNotFoundError(f"dataset file not found: {path}")


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX container into an array of its dimensions."""
    if len(data) < 4:
        raise DataParseError("truncated IDX header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DataParseError(
            f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataParseError("truncated IDX dimension table", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) < header + count:
        raise DataParseError(
            f"truncated IDX payload: need {count} bytes after the header", offset=len(data))
    if len(data) > header + count:
        logger.warning(f"IDX container has {len(data) - header - count} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    """Parse one IDX file (optionally gzipped)."""
    logger.info(f"Reading IDX file {path}")
    try:
        return parse_idx(read_bytes(path), expected_magic)
    except DataParseError as e:
        logger.error(f"Failed to parse {path}: {e}")
        raise


def normalize_pixels(raw: np.ndarray, mean: Sequence[float], std: Sequence[float],
                     dtype=np.float32) -> np.ndarray:
    """uint8 N x C x H x W -> [0, 1] -> (x - mean) / std per channel."""
    channels = raw.shape[1]
    mean_a = np.asarray(mean, dtype=np.float64)
    std_a = np.asarray(std, dtype=np.float64)
    if mean_a.size not in (1, channels) or std_a.size not in (1, channels):
        raise DimensionError(
            f"mean/std need 1 or {channels} entries, got {mean_a.size}/{std_a.size}")
    if np.any(std_a <= 0):
        raise DataValidationError(f"std must be positive, got {std_a.tolist()}")
    shape = (1, -1, 1, 1)
    x = raw.astype(np.float64) / 255.0
    x = (x - mean_a.reshape(shape)) / std_a.reshape(shape)
    return x.astype(dtype)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             mean: Sequence[float] = (0.1307,), std: Sequence[float] = (0.3081,),
             dtype=np.float32) -> LabeledDataset:
    """IDX image/label pair as an N x 1 x H x W dataset."""
    raw = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if raw.ndim != 3:
        raise DataParseError(f"IDX images must have 3 dimensions, got {raw.ndim}", offset=3)
    if labels.ndim != 1:
        raise DataParseError(f"IDX labels must have 1 dimension, got {labels.ndim}", offset=3)
    if raw.shape[0] != labels.shape[0]:
        raise DataValidationError(
            f"{raw.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= CIFAR_CLASSES:
        raise DataValidationError(f"label {labels.max()} outside [0, 9]")
    images = normalize_pixels(raw[:, None, :, :], mean, std, dtype)
    return LabeledDataset(images, labels.astype(np.int64), CIFAR_CLASSES)


def parse_cifar10(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 CHW pixel bytes."""
    if len(data) % CIFAR_RECORD:
        whole = len(data) - len(data) % CIFAR_RECORD
        raise DataParseError(
            f"truncated CIFAR-10 record: length {len(data)} is not a multiple of "
            f"{CIFAR_RECORD}", offset=whole)
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise DataValidationError(
            f"label byte {labels[bad[0]]} > 9 in record {bad[0]} "
            f"(byte offset {bad[0] * CIFAR_RECORD})")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels.astype(np.int64)


def load_cifar10_bin(paths: Union[str, Path, Sequence[Union[str, Path]]],
                     mean: Sequence[float] = (0.4914, 0.4822, 0.4465),
                     std: Sequence[float] = (0.2470, 0.2435, 0.2616),
                     dtype=np.float32) -> LabeledDataset:
    """One or more CIFAR-10 binary batch files as an N x 3 x 32 x 32 dataset."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        logger.info(f"Reading CIFAR-10 batch {path}")
        try:
            x, y = parse_cifar10(read_bytes(path))
        except (DataParseError, DataValidationError) as e:
            logger.error(f"Failed to parse {path}: {e}")
            raise
        images.append(x)
        labels.append(y)
    raw = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    y = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return LabeledDataset(normalize_pixels(raw, mean, std, dtype), y, CIFAR_CLASSES)


def make_synthetic(n: int, shape: Sequence[int] = (1, 28, 28), classes: int = 10,
                   seed: int = 0, noise: float = 0.5, dtype=np.float32) -> LabeledDataset:
    """Class-prototype images plus Gaussian noise, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    prototypes = rng.standard_normal((classes, *shape))
    labels = rng.permutation(np.arange(n) % classes)
    images = prototypes[labels] + noise * rng.standard_normal((n, *shape))
    return LabeledDataset(images.astype(dtype), labels.astype(np.int64), classes)


def iterate_batches(dataset: LabeledDataset, batch_size: int,
                    rng: Optional[np.random.Generator] = None,
                    max_batches: Optional[int] = None
                    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for b, start in enumerate(range(0, n, batch_size)):
        if max_batches is not None and b >= max_batches:
            return
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def batches_per_epoch(n: int, batch_size: int, max_batches: Optional[int] = None) -> int:
    """Iterations T of one epoch."""
    t = -(-n // batch_size)
    return t if max_batches is None else min(t, max_batches)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Shuffling generator of one epoch, so a resumed run reshuffles identically."""
    return np.random.default_rng([seed, epoch, 0x5EED])


def mnist_split(root: Union[str, Path], split: str, mean: Sequence[float],
                std: Sequence[float], dtype=np.float32) -> LabeledDataset:
    """train / test split from a directory of MNIST IDX files."""
    images, labels = MNIST_FILES[split]
    root = Path(root)
    return load_idx(_resolve(root / images), _resolve(root / labels), mean, std, dtype)


def cifar10_split(root: Union[str, Path], split: str, mean: Sequence[float],
                  std: Sequence[float], dtype=np.float32) -> LabeledDataset:
    """train / test split from a directory of CIFAR-10 binary batches."""
    root = Path(root)
    return load_cifar10_bin([_resolve(root / f) for f in CIFAR_FILES[split]],
                            mean, std, dtype)
