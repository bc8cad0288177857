"""Dense tensor helpers used by the Kronecker attention kernels.

Tensors are plain row-major ``numpy.ndarray`` objects whose trailing axis is
the feature width ``d`` and whose preceding ``m`` axes are the sequence modes.
Optional leading axes (batch, channel, head) are carried through untouched.

Modes are 0-based: mode ``m - 1`` is the fastest-varying sequence index.
"""

import numpy as np

WIDE = np.float64
STANDARD = np.float32


def ravel_offset(shape, index):
    """Flat row-major offset of ``index`` inside an array of ``shape``."""
    if len(shape) != len(index):
        raise ValueError(f"index {index} does not match shape {shape}")
    offset = 0
    for n, i in zip(shape, index):
        if not 0 <= i < n:
            raise IndexError(f"index {index} out of range for shape {shape}")
        offset = offset * n + i
    return offset


def _check_mode(ndim, mode, batch_dims):
    if ndim - batch_dims < 2:
        raise ValueError("tensor needs at least one sequence mode and a feature axis")
    n_modes = ndim - batch_dims - 1
    if not 0 <= mode < n_modes:
        raise ValueError(f"mode {mode} out of range for {n_modes} sequence modes")
    return n_modes


def mode_flatten(t, mode, batch_dims=0):
    """Unfold ``t`` along sequence ``mode`` into batched matrices.

    ``t`` has shape ``(*lead, n_0, ..., n_{m-1}, d)`` where ``lead`` spans the
    first ``batch_dims`` axes. The result has shape ``(*lead, B, n_mode, d)``
    with ``B`` the product of the remaining sequence extents, enumerated in
    row-major order over the other modes.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, mode, batch_dims)
    lead = t.shape[:batch_dims]
    n = t.shape[batch_dims + mode]
    d = t.shape[-1]
    moved = np.moveaxis(t, batch_dims + mode, -2)
    return np.ascontiguousarray(moved).reshape(*lead, -1, n, d)


def mode_fold(mat, mode, target_shape, batch_dims=0):
    """Inverse of :func:`mode_flatten` for the same ``mode`` and shape."""
    mat = np.asarray(mat)
    target_shape = tuple(int(s) for s in target_shape)
    _check_mode(len(target_shape), mode, batch_dims)
    if mat.size != int(np.prod(target_shape)):
        raise ValueError(
            f"cannot fold {mat.shape} ({mat.size} values) into {target_shape}"
        )
    n = target_shape[batch_dims + mode]
    if mat.ndim < 2 or mat.shape[-2] != n or mat.shape[-1] != target_shape[-1]:
        raise ValueError(
            f"matrix rows/cols {mat.shape[-2:]} do not match mode extent {n} "
            f"and feature width {target_shape[-1]}"
        )
    seq = list(target_shape[batch_dims:-1])
    del seq[mode]
    moved_shape = (*target_shape[:batch_dims], *seq, n, target_shape[-1])
    out = mat.reshape(moved_shape)
    return np.ascontiguousarray(np.moveaxis(out, -2, batch_dims + mode))


def batched_matmul(a, b):
    """Per-slice matrix product of ``(..., p, q)`` and ``(..., q, r)`` stacks.

    Batch axes must agree exactly or be 1 on one side.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("batched_matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if len(ba) != len(bb):
        raise ValueError(f"batch ranks differ: {a.shape} @ {b.shape}")
    for x, y in zip(ba, bb):
        if x != y and 1 not in (x, y):
            raise ValueError(f"batch extents differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def row_softmax(scores, mask=None):
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable boolean, True = allowed) sends disallowed scores to
    -inf before normalisation. A row with no allowed entry raises.
    """
    scores = np.asarray(scores)
    if np.isnan(scores).any():
        raise ValueError("row_softmax received NaN scores")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, scores.shape).any(axis=-1).all():
            raise ValueError("fully masked softmax row")
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
