"""Training loop for the fp, baseline, lts and random modes."""
# pylint: disable=W1203, R0914, R0915
import logging
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import ConfigDict
from pydantic.dataclasses import dataclass
from tqdm import tqdm

from lts_qat.checkpoint import checkpoint_io, load_checkpoint, meta_tensors
from lts_qat.common import ConfigError, DivergenceError, dtype_for
from lts_qat.config import DataConfig, RunConfig, dump_config
from lts_qat.data import (
    LabeledDataset,
    batches_per_epoch,
    cifar10_split,
    epoch_rng,
    iterate_batches,
    make_synthetic,
    mnist_split,
)
from lts_qat.layers import QuantLayer
from lts_qat.metrics import MetricsRecord, emit_metrics
from lts_qat.models import MODEL_FACTORIES, Network, build_model, evaluate
from lts_qat.optim import SGD, StepLR
from lts_qat.scheduler import LtsScheduler, RandomFreezer, load_trajectory
from lts_qat.sparse_backward import backward_flops_accounting
from lts_qat.tensor_core import set_deterministic
from lts_qat.utils import pooled_fraction

logger = logging.getLogger("lts-qat.train")

# model tensors an fp initializer contributes; momentum and masks start fresh
_INIT_SKIP = (".velocity", ".frozen", "_bounds")


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class TrainResult:
    """Final model, its records and where they were written."""
    model: Network
    record: MetricsRecord
    summary: dict
    out_dir: Path
    last_checkpoint: Optional[Path] = None


def load_splits(data: DataConfig, dtype=np.float32,
                seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test sets of the configured dataset."""
    if data.kind == "synthetic":
        full = make_synthetic(data.synthetic_train + data.synthetic_test,
                              data.synthetic_shape, data.synthetic_classes,
                              seed=seed, dtype=dtype)
        n = data.synthetic_train
        train_ds = LabeledDataset(full.images[:n], full.labels[:n], full.num_classes)
        test_ds = LabeledDataset(full.images[n:], full.labels[n:], full.num_classes)
    else:
        split = mnist_split if data.kind == "idx" else cifar10_split
        root = data.resolved_path()
        train_ds = split(root, "train", data.mean, data.std, dtype)
        test_ds = split(root, "test", data.mean, data.std, dtype)
    if data.limit_train is not None:
        train_ds = train_ds.take(data.limit_train)
    if data.limit_test is not None:
        test_ds = test_ds.take(data.limit_test)
    logger.info(f"{data.kind}: {len(train_ds)} train / {len(test_ds)} test samples "
                f"of shape {train_ds.sample_shape}")
    return train_ds, test_ds


class LevelTracker:
    """Counts level changes of every quantized weight and drift of frozen ones."""

    def __init__(self, layers: list[QuantLayer]):
        self.layers = layers
        self.prev = {layer.name: layer.weight_levels() for layer in layers}
        self.ref = {name: q.copy() for name, q in self.prev.items()}
        self.ref_mask = {layer.name: layer.weight.frozen_mask.copy() for layer in layers}
        self.changes = {layer.name: 0 for layer in layers}

    def update(self) -> None:
        """Compare the current levels with the previous iteration."""
        for layer in self.layers:
            q = layer.weight_levels()
            self.changes[layer.name] += int((q != self.prev[layer.name]).sum())
            self.prev[layer.name] = q
            mask = layer.weight.frozen_mask
            fresh = mask & ~self.ref_mask[layer.name]
            self.ref[layer.name][fresh] = q[fresh]
            self.ref_mask[layer.name] |= fresh

    def drift(self, name: str) -> int:
        """Frozen weights whose level moved since they froze."""
        return int((self.ref_mask[name] & (self.prev[name] != self.ref[name])).sum())

    def pop_changes(self) -> dict[str, int]:
        """Level changes per layer since the last call."""
        out, self.changes = self.changes, {k: 0 for k in self.changes}
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Freeze-time levels for checkpoints."""
        out = {}
        for name in self.ref:
            out[f"levels.{name}.ref"] = self.ref[name]
            out[f"levels.{name}.ref_mask"] = self.ref_mask[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Re-read current levels and restore freeze-time levels when present."""
        for layer in self.layers:
            name = layer.name
            self.prev[name] = layer.weight_levels()
            if f"levels.{name}.ref" in tensors:
                self.ref[name][...] = tensors[f"levels.{name}.ref"]
                self.ref_mask[name][...] = tensors[f"levels.{name}.ref_mask"]
            else:
                self.ref[name] = self.prev[name].copy()
                self.ref_mask[name] = layer.weight.frozen_mask.copy()


def initialize_from(model: Network, path: Union[str, Path]) -> list[str]:
    """Copy weights, biases and batch-norm state of an fp checkpoint."""
    tensors = {k: v for k, v in load_checkpoint(path).items()
               if not k.endswith(_INIT_SKIP) and not k.startswith(("meta.", "lts.", "levels."))}
    loaded = model.load_state_dict(tensors, strict=False)
    logger.info(f"Initialized {len(loaded)} tensors from {path}")
    return loaded


def pretrain_fp(config: RunConfig) -> Path:
    """In-run full-precision pre-training; returns its final checkpoint."""
    fp_config = config.model_copy(update={
        "mode": "fp",
        "epochs": config.train.pretrain_epochs,
        "out_dir": config.out_dir / "pretrain",
        "train": config.train.model_copy(update={
            "pretrain_epochs": 0, "init_from": None, "resume_from": None,
            "checkpoint_epochs": []}),
    })
    logger.info(f"Pre-training full precision for {fp_config.epochs} epochs")
    result = train(fp_config)
    return result.last_checkpoint


def _pooled_wgs(layers: list[QuantLayer]) -> float:
    return pooled_fraction((layer.weight.frozen_count, layer.weight.value.size)
                           for layer in layers)


def _run_dir_of(checkpoint: Path) -> Path:
    """Run directory holding ``checkpoints/epoch_XXXX.ckpt``."""
    return Path(checkpoint).resolve().parent.parent


def train(config: RunConfig) -> TrainResult:
    """Run one configuration end to end and write its outputs."""
    set_deterministic(config.deterministic)
    config.check_paths()
    dtype = dtype_for(config.precision)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(config), encoding="utf-8")

    train_ds, test_ds = load_splits(config.data, dtype, config.seed)
    factory = MODEL_FACTORIES[config.model]
    spec = factory(config.bit_width if config.quantized else None,
                   input_shape=train_ds.sample_shape, num_classes=train_ds.num_classes)
    model = build_model(spec, seed=config.seed, precision=config.precision,
                        options=config.quant)
    qlayers = model.quantized_layers()

    if config.quantized and config.train.resume_from is None:
        init_from = config.train.init_from
        if init_from is None and config.train.pretrain_epochs > 0:
            init_from = pretrain_fp(config)
        if init_from is not None:
            initialize_from(model, init_from)
        else:
            logger.warning("Quantizing from a randomly initialized model")
        model.init_weight_bounds()
        model.calibrate_activation_bounds(train_ds.images[:config.batch_size])

    iters = batches_per_epoch(len(train_ds), config.batch_size,
                              config.train.max_iterations_per_epoch)
    if iters == 0:
        raise ConfigError("training set is empty")
    total_iters = iters * config.epochs
    freezer: Union[LtsScheduler, RandomFreezer, None] = None
    if config.mode == "lts":
        freezer = LtsScheduler(qlayers, config.lts, iters, config.epochs)
    elif config.mode == "random":
        freezer = RandomFreezer(qlayers, load_trajectory(config.lts.trajectory),
                                total_iters, seed=config.seed)

    optimizer = SGD(model.parameters(),
                    StepLR(base_lr=config.optim.lr,
                           decay_epochs=config.optim.lr_decay_epochs,
                           factor=config.optim.lr_decay_factor),
                    momentum=config.optim.momentum,
                    weight_decay=config.optim.weight_decay)
    tracker = LevelTracker(qlayers)
    holders: list = [tracker]
    if isinstance(freezer, LtsScheduler):
        holders.append(freezer)
    record = MetricsRecord(mode=config.mode, model=config.model,
                           bit_width=config.bit_width if config.quantized else None,
                           seed=config.seed)

    start_epoch, iteration = 0, 0
    if config.train.resume_from is not None:
        tensors = checkpoint_io(model, config.train.resume_from, "load", states=holders)
        start_epoch = int(tensors["meta.epoch"])
        iteration = int(tensors["meta.iteration"])
        previous = MetricsRecord.from_dir(_run_dir_of(config.train.resume_from))
        previous.truncate(start_epoch)
        record.iterations, record.layers = previous.iterations, previous.layers
        record.flops, record.epochs = previous.flops, previous.epochs
        record.accuracy, record.snapshots = previous.accuracy, previous.snapshots
        logger.info(f"Resumed from {config.train.resume_from} at epoch {start_epoch}")
    elif qlayers:
        # levels before any QAT update
        record.add_snapshot(0, model.weight_levels())

    last_checkpoint: Optional[Path] = None
    summary: dict = {}
    for epoch in range(start_epoch, config.epochs):
        lr = optimizer.set_epoch(epoch)
        macs = {layer.name: [0, 0, 0] for layer in qlayers}
        losses = []
        batches = iterate_batches(train_ds, config.batch_size, epoch_rng(config.seed, epoch),
                                  config.train.max_iterations_per_epoch)
        for x, y in tqdm(batches, total=iters, desc=f"epoch {epoch + 1}/{config.epochs}",
                         disable=not config.train.progress, leave=False):
            iteration += 1
            loss = model.loss_and_backward(x, y)
            if not math.isfinite(loss):
                logger.error(f"loss {loss} at epoch {epoch + 1} iteration {iteration} "
                             f"(lr {lr:g})")
                raise DivergenceError(
                    f"training diverged: loss {loss} at iteration {iteration}, "
                    f"epoch {epoch + 1}, lr {lr:g}")
            reports = [layer.last_report for layer in model.quant_layers()]
            wgs = _pooled_wgs(qlayers)
            for layer in qlayers:
                macs[layer.name][0] += layer.last_report.macs_performed
                macs[layer.name][1] += layer.last_report.macs_skipped
                macs[layer.name][2] += layer.last_report.macs_bound_grad
            optimizer.step()
            stats = freezer.step(iteration) if freezer is not None else []
            tracker.update()
            p = stats[0].p if stats else 0.0
            record.log_iteration(iteration, epoch + 1, loss, wgs, p)
            if stats:
                for s in stats:
                    record.log_layer(iteration, s.layer, s.frozen, s.total, s.p, s.t)
            else:
                for layer in qlayers:
                    record.log_layer(iteration, layer.name, layer.weight.frozen_count,
                                     layer.weight.value.size, 0.0, 0.0)
            done, baseline, reduction = backward_flops_accounting(reports)
            record.log_flops(iteration, done, baseline, reduction)
            losses.append(loss)

        top1 = evaluate(model, test_ds.images, test_ds.labels, config.train.eval_batch_size)
        record.log_accuracy(epoch + 1, top1)
        changes = tracker.pop_changes()
        for layer in qlayers:
            drift = tracker.drift(layer.name)
            if drift:
                logger.warning(f"{layer.name}: {drift} frozen weights sit on a new level "
                               f"after bound updates")
            record.log_epoch_layer(epoch + 1, layer.name, changes[layer.name], drift,
                                   *macs[layer.name])
        if qlayers:
            record.add_snapshot(epoch + 1, model.weight_levels())
        summary = emit_metrics(record, out_dir)
        wgs_now = _pooled_wgs(qlayers)
        logger.info(f"epoch {epoch + 1}/{config.epochs} loss {np.mean(losses):.4f} "
                    f"top1 {top1:.2f} wgs {wgs_now:.4f} p {p:.4f} lr {lr:g}")

        if epoch + 1 in config.train.checkpoint_epochs or epoch + 1 == config.epochs:
            tensors = meta_tensors(epoch + 1, iteration, summary.get("best_top1", 0.0),
                                   summary.get("best_epoch", 0))
            last_checkpoint = out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt"
            checkpoint_io(model, last_checkpoint, "save", states=holders, meta=tensors)

    if not summary:
        summary = emit_metrics(record, out_dir)
    return TrainResult(model=model, record=record, summary=summary, out_dir=out_dir,
                       last_checkpoint=last_checkpoint)
