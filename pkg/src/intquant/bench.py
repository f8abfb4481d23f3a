"""GEMM timing: quantized uint8 path vs a float32 matmul reference.

Reports medians only. Relative speed depends on the host, so nothing here
asserts that one path beats the other.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from intquant.kernels import FusedOutputStage, QuantizedTensor, gemm_quantized, gemm_quantized_tiled
from intquant.quantization import QuantParams, normalize_multiplier

DEFAULT_SIZES = (64, 128, 256, 512)
DEFAULT_REPS = 25
DEFAULT_WARMUP = 3


@dataclass(frozen=True)
class BenchRow:
    size: int
    int_median_ns: float
    float_median_ns: float
    reps: int
    threads: int
    deterministic: bool

    @property
    def int_gops(self) -> float:
        return 2.0 * self.size**3 / self.int_median_ns

    @property
    def float_gops(self) -> float:
        return 2.0 * self.size**3 / self.float_median_ns


TSV_HEADER = "size\tint_median_ns\tint_gops\tfloat_median_ns\tfloat_gops\treps\tthreads\tdeterministic"


def _median_ns(fn, reps: int, warmup: int) -> tuple[float, list]:
    for _ in range(warmup):
        fn()
    times, results = [], []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        results.append(fn())
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times)), results


def bench_size(n: int, reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP, threads: int = 1, seed: int = 0) -> BenchRow:
    """Time one square ``n x n x n`` product on both paths."""
    if n < 1 or reps < 1 or warmup < 0 or threads < 1:
        raise ValueError("size, reps and threads must be positive; warmup non-negative")
    rng = np.random.default_rng(seed)
    lp = QuantParams(0.02, int(rng.integers(1, 256)), narrow_range=True)
    rp = QuantParams(0.05, int(rng.integers(0, 256)))
    op = QuantParams(0.02 * 0.05 * np.sqrt(n) * 40, 128)
    lhs = QuantizedTensor(rng.integers(1, 256, (n, n)), lp)
    rhs = QuantizedTensor(rng.integers(0, 256, (n, n)), rp)
    stage = FusedOutputStage(
        np.zeros(n, dtype=np.int32), normalize_multiplier(lp.scale * rp.scale / op.scale), op.zero_point
    )
    if threads > 1:
        int_fn = lambda: gemm_quantized_tiled(lhs, rhs, op, stage, threads=threads).codes  # noqa: E731
    else:
        int_fn = lambda: gemm_quantized(lhs, rhs, op, stage).codes  # noqa: E731
    a = lhs.dequantize().astype(np.float32)
    b = rhs.dequantize().astype(np.float32)
    int_ns, outs = _median_ns(int_fn, reps, warmup)
    float_ns, _ = _median_ns(lambda: a @ b, reps, warmup)
    same = all(np.array_equal(outs[0], o) for o in outs[1:])
    return BenchRow(n, int_ns, float_ns, reps, threads, same)


def run_bench(sizes=DEFAULT_SIZES, reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP, threads: int = 1, seed: int = 0) -> list[BenchRow]:
    return [bench_size(int(n), reps, warmup, threads, seed) for n in sizes]


def to_tsv(rows: list[BenchRow]) -> str:
    lines = [TSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.size}\t{r.int_median_ns:.0f}\t{r.int_gops:.4f}\t{r.float_median_ns:.0f}\t{r.float_gops:.4f}"
            f"\t{r.reps}\t{r.threads}\t{int(r.deterministic)}"
        )
    return "\n".join(lines) + "\n"
