"""Binary checkpoint container.

Layout: the magic ``LTSCKPT1`` followed by named tensors until EOF, each as
u32 name length, UTF-8 name, u8 dtype code, u8 rank, rank x u64 dims and
the raw little-endian elements.
"""
# pylint: disable=W1203
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Literal, Optional, Union

import numpy as np

from lts_qat.common import CheckpointError

logger = logging.getLogger("lts-qat.checkpoint")

MAGIC = b"LTSCKPT1"

DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("bool"),
    3: np.dtype("uint8"),
    4: np.dtype("<i2"),
    5: np.dtype("<i4"),
    6: np.dtype("<i8"),
}


def _code(array: np.ndarray) -> int:
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    for code, candidate in DTYPE_CODES.items():
        if candidate == dtype:
            return code
    raise CheckpointError(f"unsupported tensor dtype {array.dtype}")


def write_tensors(f: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Serialize ``tensors`` after the magic."""
    f.write(MAGIC)
    for name, value in tensors.items():
        array = np.asarray(value)
        code = _code(array)
        encoded = name.encode("utf-8")
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<BB", code, array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    offset = f.tell()
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint reading {what} at byte offset {offset}")
    return data


def read_tensors(f: BinaryIO) -> dict[str, np.ndarray]:
    """Inverse of ``write_tensors``."""
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(
            f"not a checkpoint or unsupported version: magic {magic!r}, expected {MAGIC!r}")
    tensors: dict[str, np.ndarray] = {}
    while True:
        head = f.read(4)
        if not head:
            return tensors
        if len(head) != 4:
            raise CheckpointError("truncated checkpoint reading a name length")
        (length,) = struct.unpack("<I", head)
        name = _read_exact(f, length, "a tensor name").decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(f, 2, f"the header of {name}"))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
        dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"the dims of {name}"))
        dtype = DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64))
        raw = _read_exact(f, count * dtype.itemsize, f"the data of {name}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def save_checkpoint(path: Union[str, Path], tensors: dict[str, np.ndarray]) -> Path:
    """Write a checkpoint file atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        write_tensors(f, tensors)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} ({len(tensors)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read every tensor of a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        try:
            return read_tensors(f)
        except CheckpointError as e:
            logger.error(f"Failed to read {path}: {e}")
            raise


def meta_tensors(epoch: int, iteration: int, best_top1: float,
                 best_epoch: int) -> dict[str, np.ndarray]:
    """Loop counters stored next to the model."""
    return {"meta.epoch": np.array(epoch, dtype=np.int64),
            "meta.iteration": np.array(iteration, dtype=np.int64),
            "meta.best_top1": np.array(best_top1, dtype=np.float64),
            "meta.best_epoch": np.array(best_epoch, dtype=np.int64)}


def checkpoint_io(model, path: Union[str, Path], direction: Literal["save", "load"],
                  states: Iterable = (), meta: Optional[dict[str, np.ndarray]] = None,
                  strict: bool = True) -> dict[str, np.ndarray]:
    """Save or restore a model together with extra state holders.

    ``states`` are objects with ``state_tensors`` / ``load_state_tensors``
    (the freezing scheduler, level trackers). On load the model is updated
    in place and every tensor of the file is returned; shape conflicts
    raise CheckpointError naming the tensor.
    """
    if direction == "save":
        tensors = dict(model.named_tensors())
        for holder in states:
            tensors.update(holder.state_tensors())
        tensors.update(meta or {})
        save_checkpoint(path, tensors)
        return tensors
    if direction != "load":
        raise ValueError(f"direction must be 'save' or 'load', got {direction}")
    tensors = load_checkpoint(path)
    model.load_state_dict(tensors, strict=strict)
    for holder in states:
        holder.load_state_tensors(tensors)
    return tensors
