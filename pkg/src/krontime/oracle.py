"""Brute-force property checks for the Kronecker attention kernels.

Each check compares the fast path against an independent construction
(digit-wise Kronecker products, explicit softmax matrices, central finite
differences) and reports the worst error seen against a fixed bound.
"""

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from krontime.attention import (
    DecompositionPlan,
    kron_attention_backward,
    kron_attention_forward,
    materialize_operator,
    shared_factors,
)


@dataclass
class PropertyResult:
    name: str
    max_error: float
    bound: float
    cases: int
    asserted: bool = True

    @property
    def passed(self):
        return (not self.asserted) or self.max_error <= self.bound

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        return out


def ordered_factorizations(n, min_factor=2):
    """All ordered tuples of factors >= ``min_factor`` whose product is ``n``."""
    if n == 1:
        yield ()
        return
    for f in range(min_factor, n + 1):
        if n % f == 0:
            for rest in ordered_factorizations(n // f, min_factor):
                yield (f, *rest)


def digit_kron(factors):
    """Kronecker product built entry by entry from mixed-radix digits."""
    sizes = [f.shape[0] for f in factors]
    n = math.prod(sizes)
    out = np.empty((n, n))
    digits = list(itertools.product(*[range(s) for s in sizes]))
    for r, rd in enumerate(digits):
        for c, cd in enumerate(digits):
            val = 1.0
            for f, i, j in zip(factors, rd, cd):
                val *= f[i, j]
            out[r, c] = val
    return out


def softmax_matrix(q, k):
    """``softmax(q k^T / sqrt(d))`` written out with Python-level row loops."""
    n, d = q.shape
    out = np.empty((n, n))
    for i in range(n):
        s = (k @ q[i]) / math.sqrt(d)
        e = np.exp(s - s.max())
        out[i] = e / e.sum()
    return out


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-12):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_kron_equivalence(ns, seeds, d=3, corrupt=False):
    worst, cases = 0.0, 0
    for n in ns:
        for factors in ordered_factorizations(n):
            plan = DecompositionPlan(factors, factor_mode="shared")
            for seed in seeds:
                rng = np.random.default_rng(seed)
                q, k = rng.normal(size=(2, n, d))
                M = materialize_operator(q, k, plan)
                fs = shared_factors(q, k, plan)
                if corrupt:
                    fs[0] = fs[0].copy()
                    fs[0][0, 0] += 1e-3
                worst = max(worst, float(np.abs(M - digit_kron(fs)).max()))
                cases += 1
    return PropertyResult("kron_equivalence_shared", worst, 1e-12, cases)


def check_single_level(ns, seeds, d=3):
    worst, cases = 0.0, 0
    for n in ns:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            q, k = rng.normal(size=(2, n, d))
            M = materialize_operator(q, k, DecompositionPlan((n,)))
            worst = max(worst, float(np.abs(M - softmax_matrix(q, k)).max()))
            cases += 1
    return PropertyResult("single_level_reduction", worst, 1e-12, cases)


def _plans_with_orders(ns, kinds):
    for n in ns:
        for factors in ordered_factorizations(n):
            for order in itertools.permutations(range(len(factors))):
                for kind in kinds:
                    yield DecompositionPlan(factors, order, kind)


def check_row_stochastic(ns, seeds, d=3):
    worst, cases = 0.0, 0
    for plan in _plans_with_orders(ns, ("batched", "shared")):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            q, k = rng.normal(size=(2, plan.seq_len, d))
            M = materialize_operator(q, k, plan)
            worst = max(worst, float(np.abs(M.sum(axis=1) - 1).max()))
            if (M < 0).any():
                worst = max(worst, float(-M.min()) + 1.0)
            cases += 1
    return PropertyResult("row_stochastic", worst, 1e-6, cases)


def order_deviation(ns, seeds, kind, d=3):
    worst, cases = 0.0, 0
    for n in ns:
        for factors in ordered_factorizations(n):
            if len(factors) < 2:
                continue
            for seed in seeds:
                rng = np.random.default_rng(seed)
                q, k, v = rng.normal(size=(3, n, d))
                base = kron_attention_forward(q, k, v, DecompositionPlan(factors, factor_mode=kind))
                for order in itertools.permutations(range(len(factors))):
                    out = kron_attention_forward(
                        q, k, v, DecompositionPlan(factors, order, kind)
                    )
                    worst = max(worst, float(np.abs(out - base).max()))
                    cases += 1
    return worst, cases


def check_order_invariance(ns, seeds):
    worst, cases = order_deviation(ns, seeds, "shared")
    return PropertyResult("order_invariance_shared", worst, 1e-10, cases)


def measure_batched_order_sensitivity(ns, seeds):
    worst, cases = order_deviation(ns, seeds, "batched")
    return PropertyResult("order_sensitivity_batched", worst, 0.0, cases, asserted=False)


def check_linearity(ns, seeds, d=3):
    worst, cases = 0.0, 0
    for plan in _plans_with_orders(ns, ("batched", "shared")):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            q, k, v1, v2 = rng.normal(size=(4, plan.seq_len, d))
            lhs = kron_attention_forward(q, k, 0.7 * v1 - 1.3 * v2, plan)
            rhs = 0.7 * kron_attention_forward(q, k, v1, plan) - 1.3 * kron_attention_forward(q, k, v2, plan)
            worst = max(worst, float(np.abs(lhs - rhs).max()))
            cases += 1
    return PropertyResult("linearity_in_v", worst, 1e-10, cases)


GRADIENT_PLANS = [(6,), (2, 3), (3, 2), (2, 2, 2), (2, 3, 2)]


def attention_gradient_error(plan, seed, d=2):
    """Worst relative error of (dq, dk, dv) against central differences."""
    rng = np.random.default_rng(seed)
    n = plan.seq_len
    q, k, v, w = rng.normal(size=(4, n, d))

    def loss(q_, k_, v_):
        return float((kron_attention_forward(q_, k_, v_, plan) * w).sum())

    _, cache = kron_attention_forward(q, k, v, plan, return_cache=True)
    grads = kron_attention_backward(w, cache)
    fds = (
        central_difference(lambda x: loss(x, k, v), q),
        central_difference(lambda x: loss(q, x, v), k),
        central_difference(lambda x: loss(q, k, x), v),
    )
    return max(rel_error(g, f) for g, f in zip(grads, fds))


def check_attention_gradients(seeds, plans=GRADIENT_PLANS):
    worst, cases = 0.0, 0
    for factors in plans:
        for kind in ("batched", "shared"):
            for order in itertools.permutations(range(len(factors))):
                plan = DecompositionPlan(factors, order, kind)
                for seed in seeds:
                    worst = max(worst, attention_gradient_error(plan, seed))
                    cases += 1
    return PropertyResult("attention_gradient", worst, 1e-5, cases)


def run_oracle_suite(max_n=64, n_seeds=20, corrupt=False):
    """Run every property; returns a JSON-ready report."""
    ns = list(range(4, max_n + 1))
    seeds = list(range(n_seeds))
    small = [n for n in ns if n <= 24]
    few = seeds[: min(5, len(seeds))]
    results = [
        check_kron_equivalence(ns, seeds, corrupt=corrupt),
        check_single_level([n for n in (4, 16, 64, 256) if n <= max(max_n, 4)] or [4], seeds),
        check_row_stochastic(small, few),
        check_order_invariance(small, few),
        measure_batched_order_sensitivity(small, few),
        check_linearity(small, few[:2]),
        check_attention_gradients(seeds[: max(n_seeds, 1)]),
    ]
    return {
        "schema": "krontime-oracle-report/1",
        "max_n": max_n,
        "seeds": n_seeds,
        "corrupted": bool(corrupt),
        "passed": all(r.passed for r in results),
        "properties": [r.to_dict() for r in results],
    }
