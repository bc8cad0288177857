"""Kronecker-decomposed self-attention.

The sequence of length ``n`` is reshaped into an order-``m`` tensor with
extents ``n_0 x ... x n_{m-1}``; attention is computed independently along
each mode (treating the other modes as batch) and applied to the value tensor
one mode at a time. The last mode indexes adjacent positions, mode 0 the
coarsest level.

Two factor modes are supported:

``batched``
    Every slice of the mode-``i`` unfolding gets its own ``n_i x n_i``
    attention matrix, computed from the actual query/key rows in that slice.
``shared``
    Queries and keys are mean-pooled over the slices first, giving a single
    ``n_i x n_i`` matrix per mode. The full operator is then exactly the
    Kronecker product of the per-mode matrices and the update order does not
    matter.

All kernels accept optional leading axes: ``q`` of shape ``(*lead, n, d)``.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from krontime.tensor import batched_matmul, mode_flatten, mode_fold, row_softmax

FACTOR_MODES = ("batched", "shared")


@dataclass(frozen=True)
class DecompositionPlan:
    """Level sizes, update order and factor mode for one attention layer."""

    factors: tuple
    update_order: Optional[tuple] = None
    factor_mode: str = "batched"

    def __post_init__(self):
        factors = tuple(int(f) for f in self.factors)
        if not factors:
            raise ValueError("plan needs at least one factor")
        if any(f < 1 for f in factors):
            raise ValueError(f"plan factors must be positive, got {factors}")
        object.__setattr__(self, "factors", factors)
        order = self.update_order
        if order is None:
            order = tuple(range(len(factors)))
        order = tuple(int(i) for i in order)
        if sorted(order) != list(range(len(factors))):
            raise ValueError(
                f"update_order {order} is not a permutation of modes 0..{len(factors) - 1}"
            )
        object.__setattr__(self, "update_order", order)
        if self.factor_mode not in FACTOR_MODES:
            raise ValueError(f"factor_mode must be one of {FACTOR_MODES}")

    @property
    def seq_len(self):
        return math.prod(self.factors)

    @property
    def n_modes(self):
        return len(self.factors)

    def batch_count(self, mode):
        return self.seq_len // self.factors[mode]

    def label(self):
        return "x".join(str(f) for f in self.factors)

    @classmethod
    def parse(cls, text, **kwargs):
        """Build a plan from ``"32x32"`` / ``"16,16,4"`` style strings."""
        parts = [p for p in text.replace(",", "x").split("x") if p.strip()]
        try:
            factors = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"cannot parse plan {text!r}") from None
        return cls(tuple(factors), **kwargs)


@dataclass
class AttentionConfig:
    """Masking options for :func:`kron_attention_forward`.

    ``masks`` maps a mode to an ``(n_i, n_i)`` boolean matrix (True = allowed).
    ``key_valid`` is a length-``n`` boolean vector marking real (non-pad)
    positions; pad keys are excluded from every softmax.
    """

    masks: dict = field(default_factory=dict)
    key_valid: Optional[np.ndarray] = None

    def __post_init__(self):
        checked = {}
        for mode, m in (self.masks or {}).items():
            m = np.asarray(m, dtype=bool)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"mask for mode {mode} must be square, got {m.shape}")
            if not m.any(axis=1).all():
                raise ValueError(f"mask for mode {mode} has a fully masked row")
            checked[int(mode)] = m
        self.masks = checked
        if self.key_valid is not None:
            self.key_valid = np.asarray(self.key_valid, dtype=bool).ravel()


_DEFAULT_CFG = AttentionConfig()


def _swap(x):
    return np.swapaxes(x, -1, -2)


def full_attention(q, k, v, mask=None):
    """Plain softmax attention ``softmax(q k^T / sqrt(d)) v``."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = batched_matmul(q, _swap(k)) / math.sqrt(q.shape[-1])
    return batched_matmul(row_softmax(scores, mask), v)


def _masked_softmax(scores, allowed):
    # rows with nothing allowed come out as all zeros
    has_any = allowed.any(axis=-1, keepdims=True)
    s = np.where(allowed, scores, -np.inf)
    s = np.where(has_any, s, 0.0)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    e = np.where(allowed, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def _pool_weights(plan, cfg, mode, dtype):
    """Per-slice pooling weights ``(B, n_i, 1)`` for shared mode."""
    if cfg.key_valid is None:
        return None
    valid = cfg.key_valid.reshape(*plan.factors, 1).astype(dtype)
    return mode_flatten(valid, mode)


def _factor_inputs(Q, K, plan, cfg, mode, batch_dims):
    Qi = mode_flatten(Q, mode, batch_dims)
    Ki = mode_flatten(K, mode, batch_dims)
    if plan.factor_mode == "batched":
        return Qi, Ki, None
    w = _pool_weights(plan, cfg, mode, Qi.dtype)
    if w is None:
        return Qi.mean(axis=-3, keepdims=True), Ki.mean(axis=-3, keepdims=True), None
    wsum = w.sum(axis=0, keepdims=True)
    wnorm = w / np.where(wsum > 0, wsum, 1.0)
    Qbar = (Qi * wnorm).sum(axis=-3, keepdims=True)
    Kbar = (Ki * wnorm).sum(axis=-3, keepdims=True)
    return Qbar, Kbar, wnorm


def _allowed(plan, cfg, mode):
    """Boolean allow-matrix broadcastable against the mode scores, or None."""
    allowed = cfg.masks.get(mode)
    n_i = plan.factors[mode]
    if allowed is not None and allowed.shape != (n_i, n_i):
        raise ValueError(f"mask for mode {mode} must be {(n_i, n_i)}, got {allowed.shape}")
    if cfg.key_valid is None:
        return allowed
    if cfg.key_valid.size != plan.seq_len:
        raise ValueError(f"key_valid has {cfg.key_valid.size} entries, plan needs {plan.seq_len}")
    kv = mode_flatten(cfg.key_valid.reshape(*plan.factors, 1), mode)[..., 0]
    if plan.factor_mode == "shared":
        kv = kv.any(axis=0, keepdims=True)
    key_ok = kv[:, None, :]
    return key_ok if allowed is None else (key_ok & allowed)


def _weights_from_inputs(Qi, Ki, plan, cfg, mode):
    scores = batched_matmul(Qi, _swap(Ki)) / math.sqrt(Qi.shape[-1])
    allowed = _allowed(plan, cfg, mode)
    if allowed is None:
        return row_softmax(scores)
    if cfg.key_valid is None:
        return row_softmax(scores, allowed)
    return _masked_softmax(scores, np.broadcast_to(allowed, scores.shape))


def factor_attention(Q, K, plan, cfg=None, mode=0, batch_dims=0):
    """Attention weights for one mode of tensorised queries and keys.

    ``Q`` and ``K`` have shape ``(*lead, n_0, ..., n_{m-1}, d)``. Returns
    ``(*lead, B_i, n_i, n_i)`` in batched mode and ``(*lead, 1, n_i, n_i)`` in
    shared mode.
    """
    cfg = cfg or _DEFAULT_CFG
    if not 0 <= mode < plan.n_modes:
        raise ValueError(f"mode {mode} out of range for plan {plan.factors}")
    Qi, Ki, _ = _factor_inputs(Q, K, plan, cfg, mode, batch_dims)
    return _weights_from_inputs(Qi, Ki, plan, cfg, mode)


@dataclass
class KronCache:
    """Forward intermediates needed by :func:`kron_attention_backward`."""

    plan: DecompositionPlan
    cfg: AttentionConfig
    tensor_shape: tuple
    batch_dims: int
    Q: np.ndarray
    K: np.ndarray
    steps: list


def _tensorize(x, plan):
    n = x.shape[-2]
    if n != plan.seq_len:
        raise ValueError(
            f"sequence length {n} does not equal plan product {plan.seq_len}; pad upstream"
        )
    return x.reshape(*x.shape[:-2], *plan.factors, x.shape[-1])


def kron_attention_forward(q, k, v, plan, cfg=None, return_cache=False):
    """Sequential per-mode attention update of ``v``.

    ``q``, ``k``: ``(*lead, n, d)``; ``v``: ``(*lead, n, d_v)``. Returns ``o``
    of the same shape as ``v`` (and a :class:`KronCache` when requested).
    """
    cfg = cfg or _DEFAULT_CFG
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    batch_dims = q.ndim - 2
    Q = _tensorize(q, plan)
    K = _tensorize(k, plan)
    O = _tensorize(v, plan)
    shape = O.shape
    if plan.factor_mode == "shared" and cfg.key_valid is not None:
        O = O * cfg.key_valid.reshape(*plan.factors, 1).astype(O.dtype)

    steps = []
    for mode in plan.update_order:
        Qi, Ki, wnorm = _factor_inputs(Q, K, plan, cfg, mode, batch_dims)
        A = _weights_from_inputs(Qi, Ki, plan, cfg, mode)
        Oi = mode_flatten(O, mode, batch_dims)
        O = mode_fold(batched_matmul(A, Oi), mode, shape, batch_dims)
        if return_cache:
            steps.append({"mode": mode, "A": A, "O_in": Oi, "Qi": Qi, "Ki": Ki, "w": wnorm})

    o = O.reshape(v.shape)
    if not return_cache:
        return o
    return o, KronCache(plan, cfg, shape, batch_dims, Q, K, steps)


def kron_attention_backward(grad_o, cache):
    """Gradients of a scalar loss with respect to ``q``, ``k`` and ``v``."""
    if cache is None or not cache.steps:
        raise ValueError("backward needs the cache returned by a forward pass")
    plan, bd = cache.plan, cache.batch_dims
    shape = cache.tensor_shape
    qk_shape = cache.Q.shape
    G = np.asarray(grad_o).reshape(shape)
    dQ = np.zeros(qk_shape, dtype=G.dtype)
    dK = np.zeros(qk_shape, dtype=G.dtype)
    scale = 1.0 / math.sqrt(qk_shape[-1])

    for step in reversed(cache.steps):
        mode, A, Oi = step["mode"], step["A"], step["O_in"]
        Gi = mode_flatten(G, mode, bd)
        dA = batched_matmul(Gi, _swap(Oi))
        if plan.factor_mode == "shared":
            dA = dA.sum(axis=-3, keepdims=True)
        G_prev = batched_matmul(_swap(A), Gi)
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQi = batched_matmul(dS, step["Ki"])
        dKi = batched_matmul(_swap(dS), step["Qi"])
        if plan.factor_mode == "shared":
            B = plan.batch_count(mode)
            w = step["w"]
            if w is None:
                dQi = np.broadcast_to(dQi / B, (*dQi.shape[:-3], B, *dQi.shape[-2:]))
                dKi = np.broadcast_to(dKi / B, (*dKi.shape[:-3], B, *dKi.shape[-2:]))
            else:
                dQi = dQi * w
                dKi = dKi * w
        dQ += mode_fold(dQi, mode, qk_shape, bd)
        dK += mode_fold(dKi, mode, qk_shape, bd)
        G = mode_fold(G_prev, mode, shape, bd)

    if plan.factor_mode == "shared" and cache.cfg.key_valid is not None:
        G = G * cache.cfg.key_valid.reshape(*plan.factors, 1).astype(G.dtype)
    lead = shape[:bd]
    n = plan.seq_len
    return (
        dQ.reshape(*lead, n, qk_shape[-1]),
        dK.reshape(*lead, n, qk_shape[-1]),
        G.reshape(*lead, n, shape[-1]),
    )


def kron_product(factors: Sequence[np.ndarray]):
    """Kronecker product with the first factor as the most significant digit."""
    if not factors:
        raise ValueError("kron_product needs at least one factor")
    out = None
    for f in factors:
        f = np.asarray(f)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ValueError(f"kron_product factors must be square, got {f.shape}")
        if out is None:
            out = f.copy()
            continue
        p, r = out.shape[0], f.shape[0]
        out = (out[:, None, :, None] * f[None, :, None, :]).reshape(p * r, p * r)
    return out


def shared_factors(q, k, plan, cfg=None):
    """The per-mode ``(n_i, n_i)`` matrices of a shared-mode plan."""
    if plan.factor_mode != "shared":
        raise ValueError("shared_factors requires factor_mode='shared'")
    Q = _tensorize(np.asarray(q), plan)
    K = _tensorize(np.asarray(k), plan)
    return [factor_attention(Q, K, plan, cfg, mode)[0] for mode in range(plan.n_modes)]


def materialize_operator(q, k, plan, cfg=None):
    """The ``n x n`` matrix ``M`` with ``M @ v == kron_attention_forward(q, k, v)``.

    Column ``j`` is the forward pass applied to the ``j``-th basis vector.
    All basis vectors go through in one call as the columns of an identity
    value matrix; value columns never mix, so each column is computed
    exactly as it would be alone. Intended for n <= 256.
    """
    q = np.asarray(q)
    n = plan.seq_len
    return kron_attention_forward(q, k, np.eye(n, dtype=q.dtype), plan, cfg)


def flop_count(plan, d):
    """Multiply-add counts ``(kron, full)`` for scores plus value products."""
    n = plan.seq_len
    kron = sum(2 * n * n_i * d for n_i in plan.factors)
    full = 2 * n * n * d
    return kron, full


def score_flop_count(plan, d):
    """Multiply-add counts ``(kron, full)`` for the query-key scores only."""
    n = plan.seq_len
    return sum(n * n_i * d for n_i in plan.factors), n * n * d
