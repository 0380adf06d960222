"""Runtime-scaling benchmark plumbing: slope fits, timing guards, CSV output."""

import csv

import numpy as np
import pytest

from deformtrace.bench import (
    DEFAULT_LENGTHS,
    dense_kernel,
    loglog_slope,
    run_bench,
    scan_kernel,
    time_kernel,
)


def test_default_ladder_is_geometric():
    assert DEFAULT_LENGTHS == tuple(2**k for k in range(8, 15))


def test_loglog_slope_recovers_power_laws():
    lengths = [256, 512, 1024, 2048]
    for p in (1.0, 2.0):
        times = [1e-6 * t**p for t in lengths]
        assert loglog_slope(lengths, times) == pytest.approx(p, abs=1e-9)


def test_time_kernel_returns_median():
    calls = []

    def fn():
        calls.append(1)

    med = time_kernel(fn, repeats=5)
    assert len(calls) == 6  # warmup + 5 timed runs
    assert med >= 0.0


def test_kernels_produce_output():
    out = scan_kernel(32)()
    assert out.data.shape == (1, 32, 16)
    dense = dense_kernel(32)()
    assert dense.shape == (32, 16)
    # attention rows are a convex combination of values
    assert np.all(np.isfinite(dense))


def test_dense_kernel_chunking_matches_unchunked():
    full = dense_kernel(64, chunk=64)()
    split = dense_kernel(64, chunk=7)()
    np.testing.assert_allclose(split, full, rtol=1e-12, atol=1e-12)


def test_run_bench_validation():
    with pytest.raises(ValueError, match="at least 4"):
        run_bench(lengths=[256, 512, 1024])
    with pytest.raises(ValueError, match="ascending"):
        run_bench(lengths=[512, 256, 1024, 2048])
    with pytest.raises(ValueError, match="unknown bench variant"):
        run_bench(lengths=[256, 512, 1024, 2048], variants=("fft",))


def test_run_bench_smoke_and_csv(tmp_path):
    # short ladder keeps this quick; slopes here are sanity checks only,
    # the acceptance run uses the full 2^8..2^14 ladder
    lengths = [64, 128, 256, 512]
    out = tmp_path / "bench.csv"
    res = run_bench(lengths=lengths, repeats=3, out_path=out)
    assert res["lengths"] == lengths
    for variant in ("ssm_scan", "dense_attention"):
        times = res["variants"][variant]["times"]
        assert len(times) == 4 and all(t > 0 for t in times)
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["variant", "length", "median_seconds"]
    assert len(rows) == 1 + 2 * len(lengths)
    assert float(rows[1][2]) == pytest.approx(res["variants"]["ssm_scan"]["times"][0])
