"""Run records: weight gradient sparsity, FLOPs reduction, ticket ratios, CSV output."""
# pylint: disable=W1203
import logging
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import orjson
import pandas as pd  # type: ignore
from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass

from lts_qat.common import MetricsError

logger = logging.getLogger("lts-qat.metrics")

ITERATION_COLUMNS = ["iter", "epoch", "loss", "wgs", "p", "flops_reduction"]
ACCURACY_COLUMNS = ["epoch", "top1"]
LAYER_COLUMNS = ["iter", "layer", "frozen", "total", "sparsity", "p", "t"]
TICKET_COLUMNS = ["epoch", "layer", "ratio"]
FLOPS_COLUMNS = ["iter", "bp_flops_done", "bp_flops_baseline", "reduction"]
EPOCH_COLUMNS = ["epoch", "layer", "level_changes", "frozen_level_drift",
                 "macs_performed", "macs_skipped", "macs_bound_grad"]

FILES = {
    "iterations": ("metrics.csv", ITERATION_COLUMNS),
    "accuracy": ("accuracy.csv", ACCURACY_COLUMNS),
    "layers": ("sparsity_per_layer.csv", LAYER_COLUMNS),
    "flops": ("flops.csv", FLOPS_COLUMNS),
    "epochs": ("epochs.csv", EPOCH_COLUMNS),
}


@dataclass(config=ConfigDict(arbitrary_types_allowed=True))
class MetricsRecord:
    """Everything a run measures, kept as plain rows until written."""
    mode: str = "lts"
    model: str = ""
    bit_width: Optional[int] = None
    seed: int = 0
    iterations: list[dict] = Field(default_factory=list)
    accuracy: list[dict] = Field(default_factory=list)
    layers: list[dict] = Field(default_factory=list)
    flops: list[dict] = Field(default_factory=list)
    epochs: list[dict] = Field(default_factory=list)
    snapshots: dict[int, dict[str, np.ndarray]] = Field(default_factory=dict)
    # rows and snapshot epochs already on disk, per output directory
    flushed: dict = Field(default_factory=dict)

    def log_iteration(self, iteration: int, epoch: int, loss: float, wgs: float,
                      p: float) -> None:
        """One metrics.csv row; the headline FLOPs reduction is wgs / 2."""
        self.iterations.append({"iter": iteration, "epoch": epoch, "loss": loss,
                                "wgs": wgs, "p": p, "flops_reduction": wgs / 2})

    def log_layer(self, iteration: int, layer: str, frozen: int, total: int,
                  p: float, t: float) -> None:
        """One sparsity_per_layer.csv row."""
        self.layers.append({"iter": iteration, "layer": layer, "frozen": frozen,
                            "total": total, "sparsity": frozen / total if total else 0.0,
                            "p": p, "t": t})

    def log_flops(self, iteration: int, done: int, baseline: int, reduction: float) -> None:
        """One flops.csv row (MAC-weighted backward accounting)."""
        self.flops.append({"iter": iteration, "bp_flops_done": done,
                           "bp_flops_baseline": baseline, "reduction": reduction})

    def log_epoch_layer(self, epoch: int, layer: str, level_changes: int,
                        frozen_level_drift: int, macs_performed: int,
                        macs_skipped: int, macs_bound_grad: int = 0) -> None:
        """One epochs.csv row."""
        self.epochs.append({"epoch": epoch, "layer": layer,
                            "level_changes": level_changes,
                            "frozen_level_drift": frozen_level_drift,
                            "macs_performed": macs_performed,
                            "macs_skipped": macs_skipped,
                            "macs_bound_grad": macs_bound_grad})

    def log_accuracy(self, epoch: int, top1: float) -> None:
        """One accuracy.csv row."""
        self.accuracy.append({"epoch": epoch, "top1": top1})

    def add_snapshot(self, epoch: int, levels: dict[str, np.ndarray]) -> None:
        """Integer weight levels of every quantized layer at an epoch end."""
        self.snapshots[epoch] = {k: np.array(v, dtype=np.uint8, copy=True)
                                 for k, v in levels.items()}

    def truncate(self, epoch: int) -> None:
        """Drop everything recorded after ``epoch``; used when resuming."""
        keep = {r["iter"] for r in self.iterations if r["epoch"] <= epoch}
        self.iterations = [r for r in self.iterations if r["epoch"] <= epoch]
        self.layers = [r for r in self.layers if r["iter"] in keep]
        self.flops = [r for r in self.flops if r["iter"] in keep]
        self.epochs = [r for r in self.epochs if r["epoch"] <= epoch]
        self.accuracy = [r for r in self.accuracy if r["epoch"] <= epoch]
        self.snapshots = {e: s for e, s in self.snapshots.items() if e <= epoch}
        self.flushed = {}

    def frame(self, name: str, start: int = 0) -> pd.DataFrame:
        """Rows of one table from ``start`` on, as a DataFrame with its exact columns."""
        _, columns = FILES[name]
        return pd.DataFrame(getattr(self, name)[start:], columns=columns)

    @classmethod
    def from_dir(cls, outdir: Union[str, Path]) -> "MetricsRecord":
        """Read back what ``emit_metrics`` wrote."""
        outdir = Path(outdir)
        summary_path = outdir / "summary.json"
        meta = {}
        if summary_path.exists():
            summary = orjson.loads(summary_path.read_bytes())
            meta = {k: summary[k] for k in ("mode", "model", "bit_width", "seed")
                    if k in summary}
        record = cls(**meta)
        for name, (filename, columns) in FILES.items():
            path = outdir / filename
            if not path.exists():
                continue
            df = pd.read_csv(path, float_precision="round_trip")
            missing = set(columns) - set(df.columns)
            if missing:
                raise MetricsError(f"{path} lacks columns {sorted(missing)}")
            setattr(record, name, df[columns].to_dict("records"))
        record.snapshots = load_snapshots(outdir)
        return record


def avg_wgs(records: Union[MetricsRecord, Iterable[float]]) -> float:
    """Mean over iterations of the pooled frozen fraction of quantized weights."""
    if isinstance(records, MetricsRecord):
        values = [r["wgs"] for r in records.iterations]
    else:
        values = list(records)
    if not values:
        raise MetricsError("average WGS needs at least one iteration")
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def best_epoch(accuracy: Union[MetricsRecord, list[dict]]) -> int:
    """Epoch with the highest top-1; the earliest wins ties."""
    rows = accuracy.accuracy if isinstance(accuracy, MetricsRecord) else accuracy
    if not rows:
        raise MetricsError("no accuracy rows to pick a best epoch from")
    best = max(rows, key=lambda r: (r["top1"], -r["epoch"]))
    return int(best["epoch"])


def ticket_ratio_curve(snapshots: dict[int, dict[str, np.ndarray]],
                       best: int) -> pd.DataFrame:
    """Per epoch and layer, the fraction of weights already at their best-model level."""
    if best not in snapshots:
        raise MetricsError(f"no level snapshot for best epoch {best}")
    reference = snapshots[best]
    rows = []
    for epoch in sorted(snapshots):
        for layer, target in reference.items():
            if layer not in snapshots[epoch]:
                raise MetricsError(f"snapshot of epoch {epoch} lacks layer {layer}")
            q = snapshots[epoch][layer]
            ratio = float(np.mean(q == target)) if target.size else 1.0
            rows.append({"epoch": epoch, "layer": layer, "ratio": ratio})
    return pd.DataFrame(rows, columns=TICKET_COLUMNS)


def mac_weighted_reduction(record: MetricsRecord) -> float:
    """1 - sum(done) / sum(baseline) over every iteration."""
    done = sum(r["bp_flops_done"] for r in record.flops)
    baseline = sum(r["bp_flops_baseline"] for r in record.flops)
    return 1.0 - done / baseline if baseline else 0.0


def summarize(record: MetricsRecord) -> dict:
    """Headline numbers of a run."""
    summary: dict = {"mode": record.mode, "model": record.model,
                     "bit_width": record.bit_width, "seed": record.seed,
                     "iterations": len(record.iterations)}
    if record.iterations:
        wgs = avg_wgs(record)
        summary.update(avg_wgs=wgs, flops_reduction=wgs / 2,
                       mac_flops_reduction=mac_weighted_reduction(record))
    if record.accuracy:
        best = best_epoch(record)
        top1 = {r["epoch"]: r["top1"] for r in record.accuracy}
        summary.update(best_epoch=best, best_top1=top1[best],
                       final_top1=record.accuracy[-1]["top1"])
    return summary


def _write_csv(df: pd.DataFrame, path: Path, append: bool = False) -> None:
    df.to_csv(path, mode="a" if append else "w", header=not append, index=False,
              encoding="utf-8", lineterminator="\n")


def snapshot_path(outdir: Path, epoch: int) -> Path:
    """levels/epoch_XXXX.npz."""
    return Path(outdir) / "levels" / f"epoch_{epoch:04d}.npz"


def load_snapshots(outdir: Union[str, Path]) -> dict[int, dict[str, np.ndarray]]:
    """Every level snapshot under ``outdir/levels``."""
    snapshots = {}
    for path in sorted((Path(outdir) / "levels").glob("epoch_*.npz")):
        epoch = int(path.stem.split("_")[1])
        with np.load(path) as npz:
            snapshots[epoch] = {k: npz[k] for k in npz.files}
    return snapshots


def emit_metrics(record: MetricsRecord, outdir: Union[str, Path]) -> dict:
    """Write every CSV, the level snapshots and summary.json; returns the summary.

    Repeated calls on the same record and directory append only the rows and
    snapshots added since the last call. ``ticket_ratio.csv`` and ``summary.json``
    depend on the best epoch so they are rewritten each time.
    """
    outdir = Path(outdir)
    state = record.flushed.setdefault(str(outdir.resolve()),
                                      {"rows": {}, "snapshots": set()})
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        for name, (filename, _) in FILES.items():
            path = outdir / filename
            done = state["rows"].get(name)
            if done is None or not path.exists() or done > len(getattr(record, name)):
                _write_csv(record.frame(name), path)
            elif done < len(getattr(record, name)):
                _write_csv(record.frame(name, start=done), path, append=True)
            state["rows"][name] = len(getattr(record, name))
        if record.accuracy and record.snapshots:
            curve = ticket_ratio_curve(record.snapshots, best_epoch(record))
        else:
            curve = pd.DataFrame(columns=TICKET_COLUMNS)
        _write_csv(curve, outdir / "ticket_ratio.csv")
        for epoch, levels in record.snapshots.items():
            if epoch in state["snapshots"]:
                continue
            path = snapshot_path(outdir, epoch)
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez_compressed(path, **levels)
            state["snapshots"].add(epoch)
        summary = summarize(record)
        (outdir / "summary.json").write_bytes(
            orjson.dumps(summary, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
    except OSError as e:
        logger.error(f"Failed to write metrics to {outdir}: {e}")
        raise
    return summary
