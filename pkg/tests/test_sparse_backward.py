"""Test sparse_backward module."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from lts_qat.common import DimensionError  # type: ignore
from lts_qat.sparse_backward import (  # type: ignore
    SkipGemmReport,
    backward_flops_accounting,
    bench_skip_gemm,
    random_mask,
    weight_grad_dense,
    weight_grad_skipped,
)


@settings(max_examples=200, deadline=None)
@given(m=st.integers(1, 9), n=st.integers(1, 9), k=st.integers(1, 17),
       density=st.floats(0.0, 1.0), seed=st.integers(0, 2 ** 20),
       dtype=st.sampled_from([np.float32, np.float64]))
def test_skipped_equals_masked_dense(m, n, k, density, seed, dtype):
    """Unfrozen entries are bit-identical to dense, frozen ones are exactly 0."""
    rng = np.random.default_rng(seed)
    act = rng.standard_normal((n, k)).astype(dtype)
    g_out = rng.standard_normal((m, k)).astype(dtype)
    mask = rng.random((m, n)) < density
    dense = weight_grad_dense(act, g_out)
    skipped, report = weight_grad_skipped(act, g_out, mask)
    assert np.array_equal(skipped[~mask], dense[~mask])
    assert np.all(skipped[mask] == 0.0)
    frozen = int(mask.sum())
    assert report.macs_performed == (m * n - frozen) * k
    assert report.macs_skipped == frozen * k
    assert report.macs_performed + report.macs_skipped == report.macs_total


def test_dense_matches_numpy():
    """The ordered kernel computes g_out . act^T."""
    rng = np.random.default_rng(3)
    act = rng.standard_normal((7, 11))
    g_out = rng.standard_normal((5, 11))
    np.testing.assert_allclose(weight_grad_dense(act, g_out), g_out @ act.T,
                               rtol=1e-12, atol=1e-12)


def test_all_frozen_skips_everything():
    """A full mask performs no MACs."""
    act = np.ones((3, 4))
    g_out = np.ones((2, 4))
    out, report = weight_grad_skipped(act, g_out, np.ones((2, 3), dtype=bool))
    assert not out.any()
    assert report.macs_performed == 0
    assert report.sparsity == 1.0


def test_hand_case():
    """2x2 output with the off-diagonal frozen."""
    act = np.array([[1.0, 2.0], [3.0, 4.0]])
    g_out = np.array([[1.0, 1.0], [2.0, 0.0]])
    mask = np.array([[False, True], [True, False]])
    out, report = weight_grad_skipped(act, g_out, mask)
    assert out.tolist() == [[3.0, 0.0], [0.0, 6.0]]
    assert report.macs_performed == 4


def test_mask_shape_mismatch():
    """Mask must be M x N."""
    with pytest.raises(DimensionError):
        weight_grad_skipped(np.ones((3, 4)), np.ones((2, 4)), np.zeros((3, 2), dtype=bool))


def test_inner_extent_mismatch():
    """act and g_out must share the inner extent."""
    with pytest.raises(DimensionError, match="inner extents"):
        weight_grad_dense(np.ones((3, 4)), np.ones((2, 5)))


def test_flops_accounting_uniform_sparsity():
    """Uniform weight-gradient sparsity s halves into a reduction of s / 2."""
    reports = [SkipGemmReport(m=4, n=5, k=6, macs_performed=60, macs_skipped=60),
               SkipGemmReport(m=2, n=2, k=10, macs_performed=20, macs_skipped=20)]
    done, baseline, reduction = backward_flops_accounting(reports)
    assert baseline == 2 * (120 + 40)
    assert done == baseline - 80
    assert reduction == pytest.approx(0.25)


def test_flops_accounting_explicit_activation_macs():
    """Explicit activation-gradient MACs replace the doubling."""
    reports = [SkipGemmReport(m=1, n=10, k=10, macs_performed=0, macs_skipped=100)]
    done, baseline, reduction = backward_flops_accounting(reports, [300])
    assert (done, baseline) == (300, 400)
    assert reduction == pytest.approx(0.25)


def test_flops_accounting_counts_bound_grad_macs():
    """Skipped MACs recomputed for the bound gradient are not savings."""
    reports = [SkipGemmReport(m=4, n=5, k=6, macs_performed=60, macs_skipped=60,
                              macs_bound_grad=24)]
    done, baseline, reduction = backward_flops_accounting(reports)
    assert (done, baseline) == (204, 240)
    assert reduction == pytest.approx(36 / 240)


def test_flops_accounting_empty():
    """No layers means no reduction."""
    assert backward_flops_accounting([]) == (0, 0, 0.0)


@pytest.mark.parametrize("density", [0.0, 0.3, 0.5, 1.0])
def test_random_mask_count(density):
    """Exactly floor(density * M * N) entries are frozen."""
    mask = random_mask(7, 9, density, np.random.default_rng(0))
    assert int(mask.sum()) == int(np.floor(density * 63))


def test_bench_table_columns():
    """The benchmark returns one row per density with exact MAC counts."""
    df = bench_skip_gemm(4, 6, 8, densities=(0.0, 0.5, 1.0), repeats=1, seed=0)
    assert list(df.columns) == ["shape", "mask_density", "macs_performed",
                                "elapsed_ns", "speedup_vs_dense"]
    assert df["macs_performed"].tolist() == [192, 96, 0]
    assert (df["shape"] == "4x6x8").all()
