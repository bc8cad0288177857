"""Wall-time and FLOP comparison of full vs. Kronecker attention forwards."""

import csv
import math
import statistics
import time
import tracemalloc

import numpy as np
from threadpoolctl import threadpool_limits

from krontime.attention import (
    DecompositionPlan,
    flop_count,
    full_attention,
    kron_attention_forward,
    score_flop_count,
)

BENCH_COLUMNS = ["length", "method", "plan", "mean_ms", "std_ms", "flops", "score_flops", "peak_bytes"]


def balanced_plan(n, levels=2):
    """Factor ``n`` into ``levels`` factors as close to equal as divisibility allows."""
    factors = []
    rest = n
    for remaining in range(levels, 1, -1):
        target = rest ** (1.0 / remaining)
        best = min(
            (f for f in range(1, rest + 1) if rest % f == 0),
            key=lambda f: (abs(math.log(f) - math.log(target)), f),
        )
        factors.append(best)
        rest //= best
    factors.append(rest)
    return DecompositionPlan(tuple(sorted(factors)))


def time_call(fn, repeats=5, warmup=1):
    """Mean and std of wall time in milliseconds; warmup calls are discarded."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    std = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return statistics.fmean(samples), std


def peak_bytes(fn):
    """Allocator-level peak during one call (numpy buffers are traced). Best effort."""
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak


def run_bench(lengths, plans=(), d=16, repeats=5, dtype="float32", seed=0, threads=1,
              measure_memory=True):
    """One row for full attention and one per matching plan at every length.

    Plans whose product differs from a length are skipped for it; a length
    with no matching plan gets a balanced two-level plan.
    """
    rows = []
    rng = np.random.default_rng(seed)
    with threadpool_limits(limits=threads):
        for n in lengths:
            q, k, v = (rng.standard_normal((n, d)).astype(dtype) for _ in range(3))
            matching = [p for p in plans if p.seq_len == n] or [balanced_plan(n)]
            full_fn = lambda: full_attention(q, k, v)  # noqa: E731
            mean, std = time_call(full_fn, repeats)
            ref_plan = DecompositionPlan((n,))
            rows.append({
                "length": n, "method": "full", "plan": str(n),
                "mean_ms": mean, "std_ms": std,
                "flops": flop_count(ref_plan, d)[1],
                "score_flops": score_flop_count(ref_plan, d)[1],
                "peak_bytes": peak_bytes(full_fn) if measure_memory else -1,
            })
            for plan in matching:
                kron_fn = lambda plan=plan: kron_attention_forward(q, k, v, plan)  # noqa: E731
                mean, std = time_call(kron_fn, repeats)
                rows.append({
                    "length": n, "method": "kron", "plan": plan.label(),
                    "mean_ms": mean, "std_ms": std,
                    "flops": flop_count(plan, d)[0],
                    "score_flops": score_flop_count(plan, d)[0],
                    "peak_bytes": peak_bytes(kron_fn) if measure_memory else -1,
                })
    return rows


def check_plans_match(lengths, plans):
    """Every explicit plan must match at least one requested length."""
    for p in plans:
        if p.seq_len not in lengths:
            raise ValueError(f"plan {p.label()} (length {p.seq_len}) matches none of {list(lengths)}")


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.4f}" if k.endswith("_ms") else r[k]) for k in BENCH_COLUMNS})
