"""Weight-gradient GEMM that skips the dot product of every frozen weight.

The weight gradient of a layer is G = g_out . act_cols^T, so G[i, j] is one
dot product of row i of the output gradient and row j of the unfolded
activations. A frozen weight's dot product is simply never computed.
"""
# pylint: disable=W1203
import logging
import time
from typing import Iterable, Optional

import numpy as np
import pandas as pd  # type: ignore
from pydantic import BaseModel, Field, computed_field

from lts_qat.common import DimensionError
from lts_qat.tensor_core import Tensor

logger = logging.getLogger("lts-qat.sparse_backward")

# elements of one product block; bounds the temporary of the row kernel
_BLOCK_ELEMENTS = 1 << 21


class SkipGemmReport(BaseModel):
    """MAC accounting of one weight-gradient GEMM."""
    m: int = Field(..., ge=0)
    n: int = Field(..., ge=0)
    k: int = Field(..., ge=0)
    macs_performed: int = Field(..., ge=0)
    macs_skipped: int = Field(..., ge=0)
    # frozen dot products computed anyway for the bound gradient
    macs_bound_grad: int = Field(0, ge=0)
    elapsed_ns: int = Field(0, ge=0)

    @computed_field  # type: ignore[misc]
    @property
    def macs_total(self) -> int:
        """M * N * K."""
        return self.m * self.n * self.k

    @computed_field  # type: ignore[misc]
    @property
    def sparsity(self) -> float:
        """Fraction of MACs skipped."""
        total = self.macs_total
        return self.macs_skipped / total if total else 0.0


def _check_operands(act_cols: Tensor, g_out: Tensor) -> None:
    if act_cols.ndim != 2 or g_out.ndim != 2 or act_cols.shape[1] != g_out.shape[1]:
        raise DimensionError(
            f"weight gradient: inner extents differ: g_out {g_out.shape} "
            f"vs act_cols {act_cols.shape}")


def _row_dots(g_row: Tensor, act_rows: Tensor) -> Tensor:
    """Dot products of one gradient row with many activation rows.

    Each product vector is accumulated in ascending p by cumsum, so a dot
    product's value never depends on which other rows are evaluated.
    """
    prod = act_rows * g_row
    np.cumsum(prod, axis=1, out=prod)
    return prod[:, -1].copy()


def _kernel(act_cols: Tensor, g_out: Tensor,
            frozen_mask: Optional[np.ndarray]) -> tuple[Tensor, int]:
    """Compute G for unfrozen entries; returns G and the number of dot products."""
    m, p = g_out.shape
    n = act_cols.shape[0]
    dtype = np.result_type(act_cols, g_out)
    out = np.zeros((m, n), dtype=dtype)
    if p == 0:
        return out, 0
    rows_per_block = max(1, _BLOCK_ELEMENTS // p)
    dots = 0
    for i in range(m):
        if frozen_mask is None:
            free = None
        else:
            row_mask = frozen_mask[i]
            if row_mask.all():
                continue
            free = None if not row_mask.any() else np.flatnonzero(~row_mask)
        g_row = g_out[i]
        if free is None:
            for start in range(0, n, rows_per_block):
                stop = min(n, start + rows_per_block)
                out[i, start:stop] = _row_dots(g_row, act_cols[start:stop])
            dots += n
        else:
            for start in range(0, free.size, rows_per_block):
                idx = free[start:start + rows_per_block]
                out[i, idx] = _row_dots(g_row, act_cols[idx])
            dots += free.size
    return out, dots


def weight_grad_dense(act_cols: Tensor, g_out: Tensor) -> Tensor:
    """G[i, j] = sum_p g_out[i, p] * act_cols[j, p], ascending p."""
    _check_operands(act_cols, g_out)
    out, _ = _kernel(act_cols, g_out, None)
    return out


def weight_grad_skipped(act_cols: Tensor, g_out: Tensor,
                        frozen_mask: np.ndarray) -> tuple[Tensor, SkipGemmReport]:
    """Weight gradient with frozen entries left at exactly 0.0.

    Unfrozen entries are bit-identical to ``weight_grad_dense``.
    """
    _check_operands(act_cols, g_out)
    m, p = g_out.shape
    n = act_cols.shape[0]
    if frozen_mask.shape != (m, n):
        raise DimensionError(
            f"frozen mask {frozen_mask.shape} does not match gradient ({m}, {n})")
    start = time.perf_counter_ns()
    out, dots = _kernel(act_cols, g_out, frozen_mask.astype(bool, copy=False))
    elapsed = time.perf_counter_ns() - start
    report = SkipGemmReport(m=m, n=n, k=p, macs_performed=dots * p,
                            macs_skipped=(m * n - dots) * p, elapsed_ns=elapsed)
    return out, report


def backward_flops_accounting(
        layer_reports: Iterable[SkipGemmReport],
        activation_grad_macs: Optional[Iterable[int]] = None) -> tuple[int, int, float]:
    """Backward MACs done vs. baseline and the fractional reduction.

    MACs skipped in a weight-gradient GEMM but spent on the bound gradient
    (``macs_bound_grad``) count as done.

    Without explicit activation-gradient sizes each layer's activation
    gradient GEMM is taken to be as large as its weight gradient GEMM, so a
    uniform weight-gradient sparsity s yields a reduction of s / 2.
    """
    reports = list(layer_reports)
    wg = sum(r.macs_total for r in reports)
    if activation_grad_macs is None:
        ag = wg
    else:
        ag = sum(int(a) for a in activation_grad_macs)
    baseline = wg + ag
    saved = sum(r.macs_skipped - r.macs_bound_grad for r in reports)
    done = baseline - saved
    reduction = saved / baseline if baseline else 0.0
    return done, baseline, reduction


def random_mask(m: int, n: int, density: float,
                rng: np.random.Generator) -> np.ndarray:
    """Mask with exactly floor(density * m * n) frozen entries."""
    total = m * n
    count = int(np.floor(density * total))
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=count, replace=False)] = True
    return flat.reshape(m, n)


def bench_skip_gemm(m: int, n: int, k: int,
                    densities: Iterable[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                    repeats: int = 5, seed: int = 0,
                    precision_dtype=np.float32) -> pd.DataFrame:
    """Median time of the skip kernel per mask density against the dense kernel."""
    rng = np.random.default_rng(seed)
    act = rng.standard_normal((n, k)).astype(precision_dtype)
    g_out = rng.standard_normal((m, k)).astype(precision_dtype)
    dense_times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        weight_grad_dense(act, g_out)
        dense_times.append(time.perf_counter_ns() - t0)
    dense_median = float(np.median(dense_times))
    rows = []
    for density in densities:
        mask = random_mask(m, n, density, rng)
        times = []
        report = None
        for _ in range(repeats):
            _, report = weight_grad_skipped(act, g_out, mask)
            times.append(report.elapsed_ns)
        median = float(np.median(times))
        rows.append({
            "shape": f"{m}x{n}x{k}",
            "mask_density": density,
            "macs_performed": report.macs_performed if report else 0,
            "elapsed_ns": int(median),
            "speedup_vs_dense": dense_median / median if median > 0 else float("inf"),
        })
        logger.info(f"bench {m}x{n}x{k} density={density:.2f} "
                    f"median={median / 1e6:.3f} ms")
    return pd.DataFrame(rows, columns=["shape", "mask_density", "macs_performed",
                                       "elapsed_ns", "speedup_vs_dense"])
