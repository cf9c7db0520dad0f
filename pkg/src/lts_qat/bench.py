"""Skip-GEMM benchmark and post-hoc analysis of run directories."""
# pylint: disable=W1203
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import orjson
import pandas as pd  # type: ignore

from lts_qat.common import MetricsError
from lts_qat.metrics import TICKET_COLUMNS, MetricsRecord, best_epoch, ticket_ratio_curve
from lts_qat.sparse_backward import bench_skip_gemm

logger = logging.getLogger("lts-qat.bench")

DENSITIES = (0.0, 0.25, 0.5, 0.75, 1.0)


def convnet_gemm_shapes(batch: int = 128,
                        input_shape: tuple[int, int, int] = (1, 28, 28)
                        ) -> list[tuple[int, int, int]]:
    """(M, N, K) of every ConvNet-S weight-gradient GEMM."""
    c, h, w = input_shape
    return [(16, c * 9, batch * h * w),
            (32, 16 * 9, batch * h * w),
            (10, 32 * (h // 2) * (w // 2), batch)]


def run_bench(shapes: Iterable[tuple[int, int, int]],
              densities: Sequence[float] = DENSITIES, repeats: int = 5, seed: int = 0,
              out: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """Benchmark every shape; optionally write the table as CSV."""
    frames = []
    for m, n, k in shapes:
        df = bench_skip_gemm(m, n, k, densities, repeats, seed)
        times = df["elapsed_ns"].to_numpy()
        if np.any(np.diff(times) > 0):
            logger.warning(f"{m}x{n}x{k}: median time is not monotone in mask density")
        frames.append(df)
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out, index=False, lineterminator="\n")
        logger.info(f"Wrote {out}")
    return table


def analyze_ticket(run_dir: Union[str, Path]) -> pd.DataFrame:
    """Recompute ticket_ratio.csv of a finished run."""
    run_dir = Path(run_dir)
    record = MetricsRecord.from_dir(run_dir)
    if not record.snapshots:
        raise MetricsError(f"{run_dir} has no level snapshots")
    best = best_epoch(record)
    curve = ticket_ratio_curve(record.snapshots, best)
    curve.to_csv(run_dir / "ticket_ratio.csv", index=False, lineterminator="\n",
                 columns=TICKET_COLUMNS)
    logger.info(f"{run_dir}: best epoch {best}")
    return curve


def compare_runs(run_dirs: Iterable[Union[str, Path]]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-run summaries and their per-mode/bit-width means over seeds."""
    rows = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "summary.json"
        if not path.exists():
            raise MetricsError(f"no summary.json in {run_dir}")
        summary = orjson.loads(path.read_bytes())
        summary["run"] = str(run_dir)
        rows.append(summary)
    runs = pd.DataFrame(rows)
    if runs.empty:
        return runs, runs
    metrics = [c for c in ("best_top1", "avg_wgs", "flops_reduction", "mac_flops_reduction")
               if c in runs.columns]
    keys = [c for c in ("mode", "bit_width") if c in runs.columns]
    grouped = runs.groupby(keys, dropna=False)[metrics]
    table = grouped.mean().add_suffix("_mean").join(grouped.std(ddof=0).add_suffix("_std"))
    table["seeds"] = grouped.size()
    return runs, table.reset_index()
