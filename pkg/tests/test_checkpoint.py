"""Test checkpoint module."""
import numpy as np
import pytest
from lts_qat.checkpoint import (  # type: ignore
    MAGIC,
    checkpoint_io,
    load_checkpoint,
    meta_tensors,
    save_checkpoint,
)
from lts_qat.common import CheckpointError  # type: ignore
from lts_qat.models import build_model, mlp_s  # type: ignore
from lts_qat.scheduler import LtsHyperparams, LtsScheduler  # type: ignore


def _model(seed=0):
    model = build_model(mlp_s(4, input_shape=(1, 4, 4)), seed=seed)
    model.init_weight_bounds()
    return model


def test_roundtrip_every_dtype(tmp_path):
    """Every supported dtype and rank survives a save/load."""
    tensors = {"f4": np.arange(6, dtype=np.float32).reshape(2, 3),
               "f8": np.array([1.5, -2.25]),
               "mask": np.array([[True, False]]),
               "levels": np.array([0, 255], dtype=np.uint8),
               "q": np.array([-3, 7], dtype=np.int16),
               "i4": np.array([1], dtype=np.int32),
               "scalar": np.array(42, dtype=np.int64)}
    path = save_checkpoint(tmp_path / "a.ckpt", tensors)
    out = load_checkpoint(path)
    assert list(out) == list(tensors)
    for name, value in tensors.items():
        assert out[name].dtype == value.dtype
        assert np.array_equal(out[name], value)
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_bad_magic(tmp_path):
    """Foreign files are rejected."""
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="unsupported version"):
        load_checkpoint(path)


def test_truncated_file(tmp_path):
    """A file cut inside a tensor reports truncation."""
    path = save_checkpoint(tmp_path / "t.ckpt", {"w": np.ones(16)})
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    """Loading a missing path is a checkpoint error."""
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.ckpt")


def test_unsupported_dtype(tmp_path):
    """complex tensors have no dtype code."""
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c.ckpt", {"z": np.ones(2, dtype=np.complex64)})


def test_empty_checkpoint(tmp_path):
    """Only the magic means no tensors."""
    path = tmp_path / "e.ckpt"
    path.write_bytes(MAGIC)
    assert load_checkpoint(path) == {}


def test_model_checkpoint_io(tmp_path):
    """Model, scheduler state and meta counters restore together."""
    src = _model(seed=1)
    src.quant_layers()[0].weight.frozen_mask[0, :3] = True
    hp = LtsHyperparams(strategy="fixing", warmup_epochs=0)
    sched = LtsScheduler(src.quantized_layers(), hp, iters_per_epoch=1, epochs=1)
    sched.states["fc2"].ema_distance[:] = 0.01
    path = tmp_path / "m.ckpt"
    checkpoint_io(src, path, "save", states=[sched], meta=meta_tensors(3, 30, 91.5, 2))

    dst = _model(seed=2)
    dst_sched = LtsScheduler(dst.quantized_layers(), hp, iters_per_epoch=1, epochs=1)
    tensors = checkpoint_io(dst, path, "load", states=[dst_sched])
    assert int(tensors["meta.epoch"]) == 3
    assert float(tensors["meta.best_top1"]) == 91.5
    assert dst.quant_layers()[0].weight.frozen_mask[0, :3].all()
    assert np.all(dst_sched.states["fc2"].ema_distance == 0.01)
    for name, value in src.state_dict().items():
        assert np.array_equal(dst.state_dict()[name], value), name


def test_shape_conflict_names_tensor(tmp_path):
    """Loading into a differently sized model names the conflicting tensor."""
    path = tmp_path / "m.ckpt"
    checkpoint_io(_model(), path, "save")
    other = build_model(mlp_s(4, input_shape=(1, 2, 2)), seed=0)
    with pytest.raises(CheckpointError, match="fc1.weight"):
        checkpoint_io(other, path, "load")


def test_bad_direction(tmp_path):
    """Only save and load exist."""
    with pytest.raises(ValueError):
        checkpoint_io(_model(), tmp_path / "x.ckpt", "copy")
