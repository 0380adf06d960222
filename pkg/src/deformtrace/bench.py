"""Runtime-scaling benchmark: forward scan vs dense attention kernels timed
over a geometric ladder of sequence lengths, with log-log slope fits.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .ssm import SSMDirection, selective_scan
from .tensor import Tensor

DEFAULT_LENGTHS = tuple(2**k for k in range(8, 15))
BENCH_DIM = 16
BENCH_STATE = 4
VARIANTS = ("ssm_scan", "dense_attention")


def scan_kernel(t_len: int, dim: int = BENCH_DIM, state: int = BENCH_STATE, seed: int = 0):
    rng = np.random.default_rng(seed)
    params = SSMDirection(rng, dim, state)
    x = Tensor(rng.normal(size=(1, t_len, dim)))

    def run():
        with T.no_grad():
            return selective_scan(x, params)

    return run


def dense_kernel(t_len: int, dim: int = BENCH_DIM, chunk: int = 512, seed: int = 0):
    """Single-head softmax(QK^T/sqrt(d))V, computed in row blocks so the
    largest lengths stay within memory while doing the full Theta(T^2) work."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(t_len, dim))
    k = rng.normal(size=(t_len, dim))
    v = rng.normal(size=(t_len, dim))
    scale = 1.0 / np.sqrt(dim)

    def run():
        out = np.empty_like(v)
        for start in range(0, t_len, chunk):
            rows = q[start : start + chunk] @ k.T * scale
            rows -= rows.max(axis=1, keepdims=True)
            np.exp(rows, out=rows)
            rows /= rows.sum(axis=1, keepdims=True)
            out[start : start + chunk] = rows @ v
        return out

    return run


def time_kernel(fn, repeats: int = 5) -> float:
    """Median wall time over ``repeats`` runs (one untimed warmup)."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(lengths, times) -> float:
    lx = np.log(np.asarray(lengths, dtype=np.float64))
    ly = np.log(np.asarray(times, dtype=np.float64))
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)


def run_bench(
    lengths=DEFAULT_LENGTHS,
    variants=VARIANTS,
    repeats: int = 5,
    out_path: str | Path | None = None,
) -> dict:
    lengths = [int(t) for t in lengths]
    if len(lengths) < 4:
        raise ValueError("need at least 4 lengths for a slope fit")
    if sorted(lengths) != lengths:
        raise ValueError("lengths must be ascending")
    resolution = time.get_clock_info("perf_counter").resolution
    results: dict = {"lengths": lengths, "variants": {}}
    rows = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown bench variant {variant!r}")
        times = []
        for t_len in lengths:
            fn = scan_kernel(t_len) if variant == "ssm_scan" else dense_kernel(t_len)
            med = time_kernel(fn, repeats)
            if med < 100 * resolution:
                raise ValueError(
                    f"{variant} at T={t_len} measured {med:.3e}s, below 100x timer "
                    f"resolution {resolution:.1e}s; raise the minimum length"
                )
            times.append(med)
            rows.append((variant, t_len, med))
        results["variants"][variant] = {
            "times": times,
            "slope": loglog_slope(lengths, times),
        }
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "length", "median_seconds"])
            for row in rows:
                w.writerow([row[0], row[1], f"{row[2]:.6e}"])
    return results
